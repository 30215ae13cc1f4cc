from .backbone import FeatureBundle, Prediction, crop_roi_features
from .net import CheckpointMismatch, RTATLNet, load_checkpoint, save_checkpoint
from .ofe import FlowHead, flow_loss
from .roii import (RoIIBatch, RoIIHeads, RoIILosses, adversarial_losses, pseudo_label,
                   reconstruction_loss, roii_step, semantic_losses)
from .transformer import RelationTransformer, attention, indicator_similarity
