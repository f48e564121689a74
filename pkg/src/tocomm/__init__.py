"""tocomm: a desk-scale laboratory for mutual-information-based task-oriented
communication.

Trainable transmitter/receiver pairs over simulated noisy channels, optimized
with information-bottleneck-family objectives, plus training-free
cross-transceiver feature alignment, SNR-adaptive hypernetworks, OoD
detection, and exact accounting of the scalars exchanged during training.
"""

from . import alignment, channel, datasets, mi, objectives, robustness, training, transceiver
from .channel import ChannelSpec, normalize_power, psnr_to_sigma, snr_to_sigma, transmit
from .datasets import (
    AnchorSet,
    Dataset,
    Example,
    load_csv,
    load_digits_toy,
    load_idx,
    make_colored_mnist,
    make_synthetic_gaussian,
    select_anchors,
)
from .mi import (
    Constellation,
    MIEstimate,
    club_estimate,
    discrete_channel_mi,
    gaussian_mi_analytic,
    kl_gauss_to_std,
    mine_estimate,
)
from .objectives import (
    LossReport,
    dib_loss,
    ife_loss,
    infonce_loss,
    prune_latents,
    rib_loss,
    vib_loss,
)
from .alignment import (
    AlignmentMap,
    apply_map,
    cross_matrix,
    fit_learned,
    fit_ls,
    fit_mmse,
    relative_encode,
)
from .robustness import OodReport, calibrate_threshold, ood_metrics, ood_score
from .training import (
    TrainConfig,
    TrainingLedger,
    evaluate,
    snr_sweep,
    train_hybrid,
    train_local,
    train_remote,
)
from .transceiver import TransceiverPair, build_pair, hyper_adapt, parameter_count

__version__ = "0.1.0"
