"""Session protocol: crypto envelopes, key distribution, components, runner."""

from .config import (
    DynamicClippingConfig,
    ModelSpec,
    ReportRow,
    SessionConfig,
    STOP_BUDGET_EXHAUSTED,
    STOP_MAX_ITERATIONS,
    STOP_TARGET_ACCURACY,
    StopConfig,
    TrainingReport,
    resolve_dataset,
)
from .crypto import Envelope, decode_envelope, decrypt_envelope, encrypt_envelope, open_asset, seal_asset
from .kds import (
    CODE_VERSION,
    DENY_ALREADY_RELEASED,
    DENY_MEASUREMENT_MISMATCH,
    DENY_UNKNOWN_KEY,
    KdsResponse,
    KeyDistributionService,
    KeyRecord,
    Measurement,
    attest,
)
from .session import (
    ADMIN_ID,
    Admin,
    AssetStore,
    DataHandler,
    KIND_CLIP_BOUND,
    KIND_HISTOGRAM,
    KIND_ITERATION_START,
    KIND_MASK,
    KIND_MASKED_GRADIENT,
    KIND_REGISTER,
    KIND_STOP,
    KIND_UPDATE_RESULT,
    Message,
    ModelUpdater,
    Network,
    SessionTrace,
    UPDATER_ID,
    allowed_kinds,
    backprop_plugin,
    decode_payload,
    derive_session_keys,
    encode_payload,
    prepare_session,
    run_session,
    worker_id,
)

__all__ = [name for name in dir() if not name.startswith("_")]
