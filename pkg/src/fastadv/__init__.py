"""Fast adversarial training laboratory: tape-based autodiff, l-inf attacks,
FGSM/PGD/free training loops, and robustness evaluation."""

from .attacks import AttackSpec, clamp_to_image, fgsm_step, init_delta, pgd_attack, project_linf
from .autodiff import NonFiniteError, ShapeError, Tape, Tensor
from .data import Batch, Dataset, batches, load_mnist, parse_idx, serialize_idx, synthetic_margin_dataset
from .estimators import AdversarialClassifier
from .evaluation import EvalReport, evaluate, extract_learning_curves, mnist_eval_suite, perturbation_histogram, stepsize_sweep
from .models import build_linear, build_mnist_cnn, build_model, init_parameters
from .training import (
    DetectorSpec,
    RunRecord,
    SGD,
    TrainSpec,
    cyclic_lr,
    detect_catastrophic_overfitting,
    train,
    train_fgsm,
    train_free,
    train_pgd,
    train_standard,
)

__version__ = "0.1.0"
