"""Joint multi-parameter microstructure estimation from sparse diffusion MRI.

Library layout:

- :mod:`mpmri.tensor_core` -- order-4 tensor SVD, singular spectra, the
  spectral-alignment regularizer and its analytic gradient
- :mod:`mpmri.qspace` -- gradient schemes, electrostatic placement, subsampling
- :mod:`mpmri.dki_model` -- kurtosis forward model, metrics, WLLS fit
- :mod:`mpmri.noddi_model` -- three-compartment forward model and grid fit
- :mod:`mpmri.noise_sim` -- spatially varying magnitude (Rician) noise
- :mod:`mpmri.phantom` -- synthetic phantom and ground-truth rendering
- :mod:`mpmri.estimator` -- per-voxel MLP, combined loss, training loop
- :mod:`mpmri.nala` -- adaptive learning of the regularization weight
- :mod:`mpmri.eval_metrics` -- PSNR / SSIM / nRMSE / Dice / paired t-tests
- :mod:`mpmri.cli_io` -- file formats, experiment configs, the ``mpmri`` CLI
"""

__version__ = "0.1.0"

from .tensor_core import (  # noqa: F401
    GroupingMode,
    TsvdFactors,
    reconstruct,
    tdr_grad,
    tdr_loss,
    truncate_spectrum,
    tsvd,
    tsvd_spectrum,
)
from .nala import NalaState, nala_init, nala_step  # noqa: F401
from .qspace import GradientScheme, acceleration_factor, make_dense_scheme, subsample  # noqa: F401
