__version__ = '0.1'
__author__ = 'eqvx developers'

import logging

from eqvx.pipeline import check_equivariance, run_pipeline

logging.getLogger(__name__).addHandler(logging.NullHandler())
