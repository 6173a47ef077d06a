from .network import Network, forward_backward, softmax_cross_entropy
from .optim import sgd_step, warmup_schedule
from .presets import build_preset
