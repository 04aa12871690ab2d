from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import finite_difference_check
from .layers import (BatchNorm, batchnorm_forward, conv2d_backward, conv2d_forward, conv2d_naive,
                     linear_backward, linear_forward, log_softmax, relu_backward, relu_forward,
                     softmax, softmax_backward, uniform_init)
from .lstm import LstmParams, LstmState, lstm_backward, lstm_forward, lstm_step, sigmoid
from .optim import Adam, OptimizerConfig, Sgd, sgd_update
