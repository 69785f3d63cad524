"""Conditional-diffusion image restoration toolkit.

Forward/backward diffusion with a prompt-conditioned transformer U-Net
denoiser, degradation synthesis for paired training data, and full- and
no-reference quality metrics (PSNR, SSIM, UIQM, UCIQE).
"""

import torch

__version__ = "0.1.0"

# All parallelism is owned by this package's own worker pools so that results
# are bit-identical regardless of the --threads setting; intra-op threading
# inside the tensor backend would break that guarantee.
torch.set_num_threads(1)
