import hashlib
import math
import threading
from typing import Callable, List, Sequence, TypeVar

import numpy as np

T = TypeVar('T')
R = TypeVar('R')


def wrap_angle(angle):
    '''
    Reduces an angle (scalar or array) into [-pi, pi).
    '''
    return np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def map_in_threads(fn: Callable[[T], R], items: Sequence[T], threads: int=1) -> List[R]:
    '''
    Applies ``fn`` to every item, fanning contiguous batches out over worker
    threads. Results are returned in input order, so the output never depends
    on the number of threads.

    Args:
        fn: A pure function of one item.
        items: The items to map over.
        threads: Maximum number of worker threads. Values <= 1 run inline.

    Returns:
        The list of results, in the order of ``items``.
    '''
    if not items:
        return []

    if threads <= 1 or len(items) == 1:
        return [fn(item) for item in items]

    num_threads = min(threads, len(items))
    batch_size = math.ceil(len(items) / num_threads)
    results: List[List[R]] = [[] for _ in range(num_threads)]
    errors: List[BaseException] = []

    def run_batch(thread_num):
        start = thread_num * batch_size
        end = min(len(items), (thread_num + 1) * batch_size)
        try:
            results[thread_num] = [fn(items[i]) for i in range(start, end)]
        except BaseException as e:  # re-raised in the calling thread
            errors.append(e)

    workers = [
        threading.Thread(target=run_batch, args=(i,))
        for i in range(num_threads)
    ]

    for t in workers:
        t.start()

    for t in workers:
        t.join()

    if errors:
        raise errors[0]

    return sum(results, [])
