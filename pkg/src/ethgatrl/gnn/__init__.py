from .layers import (Activation, AttentionMatrix, LayerParams, gat_attention, gat_backward, gat_forward,
                     gatrl_backward, gatrl_forward, graphconv_backward, graphconv_forward, sage_aggregate,
                     sage_backward, sage_forward)
from .model import GNNModel, ModelSpec
from .train import (Trainer, TrainingDiverged, TrainResult, accuracy, loss_and_grads, masked_cross_entropy,
                    train_node_classifier)
