"""Asymmetric variational DCT codec for multi-channel EEG on an edge-fog link."""

from .bitstream import QuantFrame, dequantize, frame_parse, frame_serialize, quantize
from .decoder import DecoderParams, decode_frame
from .encoder import EncoderParams, encode_frame, model_stats
from .evalkit import (
    Checkpoint,
    MetricsRecord,
    Recording,
    checkpoint_load,
    checkpoint_save,
    compute_metrics,
    load_recording,
    save_recording,
    segment_frames,
    synthetic_recording,
)
from .fognet import LinkReport, SessionConfig, edge_stream, fog_receive, run_loopback, simulate_link
from .objective import LossConfig, init_model, train
from .transform import dct, idct

__version__ = "0.1.0"
