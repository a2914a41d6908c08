from mtdistill.data.types import Box, BoxSet, Chip, DatasetManifest, LabelMap, ManifestEntry
from mtdistill.data.tiles import crop_tiles
from mtdistill.data.boxes import mask_to_boxes
from mtdistill.data.codec import ClassTable, decode_label_image, encode_label_image
from mtdistill.data.synthetic import SyntheticConfig, make_synthetic_dataset
from mtdistill.data.loader import ChipDataset, load_dataset
from mtdistill.data.ingest import ingest_tiles

__all__ = [
    "Box",
    "BoxSet",
    "Chip",
    "ChipDataset",
    "ClassTable",
    "DatasetManifest",
    "LabelMap",
    "ManifestEntry",
    "SyntheticConfig",
    "crop_tiles",
    "decode_label_image",
    "encode_label_image",
    "ingest_tiles",
    "load_dataset",
    "make_synthetic_dataset",
    "mask_to_boxes",
]
