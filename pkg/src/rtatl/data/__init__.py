from .types import AlignmentError, DataError, FlowPair, MaskDescriptor, Sample
from .align import align_face
from .roi import apply_roi_mask, compute_au_centers, restore_patches
from .flow import downsample_flow, prepare_flow_target, read_flo, write_flo
from .augment import augment
from .synth import synth_dataset
from .manifest import ManifestDataset, export_samples, read_manifest

__all__ = [
    "AlignmentError", "DataError", "FlowPair", "MaskDescriptor", "Sample",
    "align_face", "apply_roi_mask", "compute_au_centers", "restore_patches",
    "downsample_flow", "prepare_flow_target", "read_flo", "write_flo",
    "augment", "synth_dataset", "ManifestDataset", "export_samples", "read_manifest",
]
