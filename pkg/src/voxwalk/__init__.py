"""voxwalk: randomized-connection 3D segmentation networks fused by
graph-based node selection and random-walker label inference."""

from .convops import (
    Conv3DParams,
    conv3d,
    pool3d,
    upsample,
)
from .gradcheck import grad_check
from .lstm import ConvLSTMParams, ConvLSTMState, LSTMParams, convlstm_step, lstm_step
from .network import (
    NetworkSpec,
    RandomConnectionNet,
    TrainConfig,
    infer,
    load_checkpoint,
    sample_mask,
    save_checkpoint,
    train_toy,
)
from .selection import SelectionResult, confidence, consistency, node_energy, select
from .walker import (
    CompactGraph,
    IntensityVolume,
    WalkerSolution,
    assemble,
    edge_weight,
    refine,
    solve,
)
from .metrics import LabelVolume, dice, stage_report
from .volio import read_volume, synth, write_volume
from .config import PipelineConfig

__version__ = "0.1.0"
