from typing import Optional


class EqvxError(Exception):
    'Base class for all errors raised by eqvx.'


class InvalidArgumentError(EqvxError, ValueError):
    'An argument violates the documented preconditions.'


class FormatError(EqvxError, ValueError):
    'An input file is malformed.'

    def __init__(self, message: str, path: Optional[str]=None, line: Optional[int]=None,
                 record: Optional[int]=None):
        self.path = path
        self.line = line
        self.record = record
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f'line {line}')
        if record is not None:
            where.append(f'record {record}')
        if where:
            message = f'{", ".join(where)}: {message}'
        super().__init__(message)


class ConfigError(EqvxError):
    'The pipeline configuration is invalid or inconsistent.'


class RefusalError(EqvxError):
    'The request is well formed but cannot be honoured (size cap, non-closed group).'


class OracleError(EqvxError):
    'A function checked by an oracle produced a non-finite value.'


class StageError(EqvxError):
    'A pipeline stage failed.'

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f'stage "{stage}" failed: {cause}')


class VerificationError(EqvxError):
    'An equivariance report did not pass.'
