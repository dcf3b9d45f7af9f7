"""Queue-reactive Hawkes models for level-I limit order book data."""
from .errors import ConvergenceError, InconsistencyError, InputError, QRHError
from .kernels import DecaySet, eval_kernel, kernel_norms, spectral_radius, stability_check
from .lobdata import EventStream, Segment, StateGrid, parse_l1_csv, write_l1_csv
from .qrh1 import Qrh1Params, fit_hawkes3, fit_qr, fit_qrh1, loglik_grad_qrh1, loglik_qrh1
from .qrh2 import Qrh2Params, fit_qrh2_ls, fit_qrh2_mle, loglik_grad_qrh2, loglik_qrh2, ls_objective
from .simulate import SimConfig, qr_invariant, simulate_qrh1, simulate_qrh2

__version__ = "0.1.0"
