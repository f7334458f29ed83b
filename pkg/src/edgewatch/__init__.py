"""On-device violation monitoring pipeline and onload/offload latency simulator."""
from .detector import (
    Detection,
    DetectionClass,
    DetectorProfile,
    SceneFrame,
    ScriptedDetector,
    ToyDetector,
    TruthLabel,
    build_toy_detector,
    detect,
)
from .dss import DecisionSupport, DssAction, DssConfig, DssState, Phase, step
from .metrics import ConfusionMatrix, latency_stats, scores
from .quantkit import (
    AffineQuantizer,
    MagnitudePruner,
    QuantizedTensor,
    dequantize,
    prune_magnitude,
    quantize_affine,
    storage_footprint,
)
from .simcore import (
    DEVICE_PRESETS,
    REFERENCE_LATENCIES,
    DeviceProfile,
    Scenario,
    Strategy,
    compare_strategies,
    frame_latency,
    load_scenario,
    run_session,
)
from .transport import LinkModel, OutboundQueue
from .vault import EncryptionKey, IncidentMeta, open_incident, seal_incident, xor_transform

__version__ = "0.1.0"
