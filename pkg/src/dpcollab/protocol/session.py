"""The collaborative training session.

Three component roles exchange authenticated envelopes over directed
channels: the admin coordinates iterations, draws the central noise and
splits it into per-worker masks; each data handler runs the (untrusted)
gradient plugin behind the barrier and emits only masked gradients and norm
histograms; the model updater aggregates, updates, and evaluates. The model
itself moves between updater and workers through the sealed asset store, so
the only worker-originated message flows are the barrier-mediated ones:

    worker  -> updater : masked_gradient
    worker  -> admin   : register, histogram
    admin   -> worker  : iteration_start, mask, clip_bound, stop
    admin   -> updater : iteration_start, stop
    updater -> admin   : register, update_result

Two schedulers run the same message protocol: a sequential deterministic one
(the default; required for reproducible reports) and a thread-per-component
one. Dynamic clip bounds selected in iteration t take effect in iteration
t+1, keeping each iteration's noise scale consistent with the bound its
gradients were clipped to.
"""

from __future__ import annotations

import base64
import hashlib
import inspect
import json
import math
import queue
import struct
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..accounting import CompositionLedger, GaussianEvent, budget_spent
from ..data import Batch, round_robin_indices
from ..errors import (
    ConfigurationError,
    ProtocolAbort,
    ProtocolError,
    ReplayError,
    SynchronizationError,
)
from ..models import (
    MlpModel,
    accuracy,
    apply_update,
    checkpoint_dumps,
    checkpoint_loads,
    flatten_params,
    init_mlp,
    loss_and_grad_per_example,
    mean_loss,
    parameter_count,
)
from ..privacy import (
    NoiseCorrectionState,
    NormHistogram,
    aggregate_histograms,
    build_norm_histogram,
    clip_gradient,
    generate_masks,
    next_effective_noise,
    per_step_sigma,
    select_clip_bound,
)
from .config import (
    ReportRow,
    SessionConfig,
    STOP_BUDGET_EXHAUSTED,
    STOP_MAX_ITERATIONS,
    STOP_TARGET_ACCURACY,
    TrainingReport,
    resolve_dataset,
)
from .crypto import decode_envelope, decrypt_envelope, encrypt_envelope, open_asset, seal_asset
from .kds import CODE_VERSION, KeyDistributionService, KeyRecord, attest

ADMIN_ID = "admin"
UPDATER_ID = "updater"

KIND_REGISTER = "register"
KIND_ITERATION_START = "iteration_start"
KIND_MASK = "mask"
KIND_CLIP_BOUND = "clip_bound"
KIND_HISTOGRAM = "histogram"
KIND_MASKED_GRADIENT = "masked_gradient"
KIND_UPDATE_RESULT = "update_result"
KIND_STOP = "stop"


def worker_id(index: int) -> str:
    return f"worker-{index}"


def allowed_kinds(sender: str, recipient: str) -> set:
    """Message kinds each directed channel may carry; empty set = no channel."""
    if sender.startswith("worker-"):
        if recipient == UPDATER_ID:
            return {KIND_MASKED_GRADIENT}
        if recipient == ADMIN_ID:
            return {KIND_REGISTER, KIND_HISTOGRAM}
        return set()
    if sender == ADMIN_ID:
        if recipient.startswith("worker-"):
            return {KIND_ITERATION_START, KIND_MASK, KIND_CLIP_BOUND, KIND_STOP}
        if recipient == UPDATER_ID:
            return {KIND_ITERATION_START, KIND_STOP}
        return set()
    if sender == UPDATER_ID and recipient == ADMIN_ID:
        return {KIND_REGISTER, KIND_UPDATE_RESULT}
    return set()


# --- payload codec -------------------------------------------------------

_ND_MARKER = "__nd__"


def _jsonify(value):
    if isinstance(value, np.ndarray):
        return {
            _ND_MARKER: base64.b64encode(np.ascontiguousarray(value).tobytes()).decode(),
            "dtype": value.dtype.str,
            "shape": list(value.shape),
        }
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonify(v) for v in value]
    return value


def _dejsonify(value):
    if isinstance(value, dict):
        if _ND_MARKER in value:
            flat = np.frombuffer(base64.b64decode(value[_ND_MARKER]), dtype=np.dtype(value["dtype"]))
            return flat.reshape(value["shape"]).copy()
        return {k: _dejsonify(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_dejsonify(v) for v in value]
    return value


def encode_payload(payload: dict) -> bytes:
    """Canonical bytes for a message payload (arrays kept bit-exact)."""
    return json.dumps(_jsonify(payload), sort_keys=True, separators=(",", ":")).encode()


def decode_payload(raw: bytes) -> dict:
    return _dejsonify(json.loads(raw.decode()))


# --- transport -----------------------------------------------------------


@dataclass(frozen=True)
class Message:
    sender: str
    recipient: str
    kind: str
    sequence: int
    payload: dict


class _Channel:
    __slots__ = ("index", "send_seq", "recv_seq")

    def __init__(self, index: int):
        self.index = index
        self.send_seq = 0
        self.recv_seq = 0


class Network:
    """In-process message bus speaking the envelope wire format.

    Every send is encoded to envelope bytes, logged, and delivered through
    the same decode/authenticate/replay-check path an external transport
    would use; `deliver` is public so tests can inject captured or tampered
    bytes.
    """

    def __init__(self, transport_key: bytes, concurrent: bool = False, receive_timeout: float = 30.0):
        self._key = transport_key
        self._concurrent = concurrent
        self._timeout = receive_timeout
        self._channels = {}
        self._inboxes = {}
        self._lock = threading.Lock()
        self.audit = []  # (sender, recipient, kind, sequence)
        self.raw_log = []  # encoded envelope bytes in send order

    def register(self, component_id: str) -> None:
        with self._lock:
            if component_id in self._inboxes:
                raise ProtocolError(f"component {component_id!r} already registered")
            self._inboxes[component_id] = queue.Queue() if self._concurrent else deque()

    def send(self, sender: str, recipient: str, kind: str, payload: dict) -> None:
        if kind not in allowed_kinds(sender, recipient):
            raise ProtocolError(f"channel {sender}->{recipient} may not carry {kind!r}")
        if recipient not in self._inboxes:
            raise ProtocolError(f"unknown recipient {recipient!r}")
        with self._lock:
            channel = self._channels.get((sender, recipient))
            if channel is None:
                channel = _Channel(len(self._channels))
                self._channels[(sender, recipient)] = channel
        channel.send_seq += 1
        nonce = struct.pack("<IQ", channel.index, channel.send_seq)
        envelope = encrypt_envelope(
            self._key, sender, recipient, channel.send_seq, kind, nonce, encode_payload(payload)
        )
        raw = envelope.encode()
        with self._lock:
            self.audit.append((sender, recipient, kind, channel.send_seq))
            self.raw_log.append(raw)
        self.deliver(raw)

    def deliver(self, raw: bytes) -> None:
        """Authenticate raw envelope bytes and enqueue for the recipient."""
        envelope = decode_envelope(raw)
        with self._lock:
            channel = self._channels.get((envelope.sender, envelope.recipient))
        if channel is None:
            raise ProtocolError(
                f"delivery on unknown channel {envelope.sender}->{envelope.recipient}"
            )
        if envelope.sequence <= channel.recv_seq:
            raise ReplayError(
                f"envelope {envelope.sender}->{envelope.recipient} sequence "
                f"{envelope.sequence} does not advance past {channel.recv_seq}"
            )
        payload = decrypt_envelope(self._key, envelope)
        channel.recv_seq = envelope.sequence
        message = Message(
            envelope.sender, envelope.recipient, envelope.kind, envelope.sequence, decode_payload(payload)
        )
        inbox = self._inboxes[envelope.recipient]
        if self._concurrent:
            inbox.put(message)
        else:
            inbox.append(message)

    def receive(self, component_id: str, expected_kinds=None) -> Message:
        inbox = self._inboxes[component_id]
        if self._concurrent:
            try:
                message = inbox.get(timeout=self._timeout)
            except queue.Empty:
                raise SynchronizationError(f"{component_id} timed out waiting for a message") from None
        else:
            if not inbox:
                raise SynchronizationError(f"{component_id} expected a message but none is queued")
            message = inbox.popleft()
        if expected_kinds is not None and message.kind not in expected_kinds:
            raise ProtocolError(
                f"{component_id} expected one of {sorted(expected_kinds)}, "
                f"got {message.kind!r} from {message.sender}"
            )
        return message


class AssetStore:
    """Untrusted storage: holds sealed blobs only."""

    def __init__(self):
        self._blobs = {}
        self._lock = threading.Lock()

    def put(self, asset_id: str, blob: bytes) -> None:
        with self._lock:
            self._blobs[asset_id] = bytes(blob)

    def get(self, asset_id: str) -> bytes:
        with self._lock:
            if asset_id not in self._blobs:
                raise ProtocolError(f"missing asset {asset_id!r}")
            return self._blobs[asset_id]

    def asset_ids(self):
        with self._lock:
            return sorted(self._blobs)


class SessionTrace:
    """Optional debug/test instrumentation filled in by the components."""

    def __init__(self):
        self._lock = threading.Lock()
        self.iterations = {}
        self.network = None

    def record(self, iteration: int, key: str, value) -> None:
        with self._lock:
            self.iterations.setdefault(iteration, {})[key] = value


# --- plugins (the sandbox boundary) --------------------------------------


def backprop_plugin(model: MlpModel, batch: Batch):
    """Default data-handling plugin: exact per-example backprop gradients."""
    return loss_and_grad_per_example(model, batch)[1]


def plugin_arity(plugin) -> int:
    """2 for (model, batch) plugins, 3 for (model, batch, scratch)."""
    try:
        signature = inspect.signature(plugin)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"plugin is not inspectable: {exc}") from exc
    positional = [
        p
        for p in signature.parameters.values()
        if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)
    ]
    if any(p.kind == p.VAR_POSITIONAL for p in signature.parameters.values()):
        return 3
    if len(positional) in (2, 3):
        return len(positional)
    raise ConfigurationError(
        "plugin must accept exactly (model, batch) or (model, batch, scratch)"
    )


# --- components ----------------------------------------------------------


class DataHandler:
    """One dataset owner's component; gradients leave only through the barrier."""

    def __init__(self, index, config: SessionConfig, store, network, shard_key, model_key, trace=None):
        self.index = index
        self.id = worker_id(index)
        self.config = config
        self.store = store
        self.network = network
        self._shard_key = shard_key
        self._model_key = model_key
        self._trace = trace
        self.clip_bound = config.privacy.clip_bound
        self._next_clip_bound = None
        self._plugin = backprop_plugin
        self._arity = 2
        self._shard = None
        self._pending = None

    def register_plugin(self, plugin) -> None:
        """Install the untrusted gradient function behind the barrier.

        The plugin receives copies of the model and batch plus a fresh
        scratch dict per iteration; it has no handle to the network, the
        asset store, other workers, or anything that survives the iteration.
        """
        self._arity = plugin_arity(plugin)
        self._plugin = plugin

    def load_assets(self) -> None:
        raw = open_asset(self.store.get(f"shard-{self.index}"), self._shard_key)
        payload = decode_payload(raw)
        self._shard = Batch(payload["features"], payload["labels"])

    def announce(self) -> None:
        self.network.send(self.id, ADMIN_ID, KIND_REGISTER, {"component": "data_handler", "index": self.index})

    def _current_model(self) -> MlpModel:
        return checkpoint_loads(open_asset(self.store.get("model"), self._model_key).decode())

    def _run_plugin(self, iteration: int, model: MlpModel, batch: Batch):
        scratch = {}
        args = (model.copy(), Batch(batch.features.copy(), batch.labels.copy()))
        try:
            grads = self._plugin(*args) if self._arity == 2 else self._plugin(*args, scratch)
        except Exception as exc:
            raise ProtocolAbort(self.id, iteration, f"plugin raised {exc!r}") from exc
        # scratch is discarded here; nothing the plugin stashed survives.
        expected = model.parameter_count
        if not isinstance(grads, (list, tuple)) or len(grads) != len(batch):
            raise ProtocolAbort(
                self.id, iteration,
                f"plugin returned {0 if not isinstance(grads, (list, tuple)) else len(grads)} "
                f"gradients for a batch of {len(batch)}",
            )
        checked = []
        for g in grads:
            g = np.asarray(g, dtype=np.float64)
            if g.ndim != 1 or g.size != expected:
                raise ProtocolAbort(
                    self.id, iteration, f"plugin gradient dim {g.size} != model dim {expected}"
                )
            if not np.all(np.isfinite(g)):
                raise ProtocolAbort(self.id, iteration, "plugin returned non-finite gradient values")
            checked.append(g)
        return checked

    def phase_compute(self) -> None:
        """First worker phase: take the iteration opening, run the plugin.

        Sends the norm histogram when the admin requested one; clipping and
        masking wait for phase_emit so a histogram round can complete in
        between.
        """
        self._phase_compute_with(self.network.receive(self.id, {KIND_ITERATION_START}))

    def phase_emit(self) -> None:
        """Second worker phase: clip at the current bound, mask, emit."""
        pending = self._pending
        if pending is None:
            raise SynchronizationError(f"{self.id} has no computed pending step")
        self._pending = None
        if pending["await_bound"]:
            bound_msg = self.network.receive(self.id, {KIND_CLIP_BOUND})
            self._next_clip_bound = float(bound_msg.payload["bound"])
        total = np.zeros(len(pending["mask"]))
        for g in pending["grads"]:
            total += clip_gradient(g, self.clip_bound)
        self.network.send(
            self.id, UPDATER_ID, KIND_MASKED_GRADIENT,
            {
                "iteration": pending["iteration"],
                "vector": total + pending["mask"],
                "batch_size": pending["batch_size"],
                "mean_loss": pending["mean_loss"],
            },
        )

    def run_loop(self) -> None:
        """Concurrent-mode actor loop; exits on the admin's stop message."""
        while True:
            message = self.network.receive(self.id)
            if message.kind == KIND_STOP:
                return
            if message.kind != KIND_ITERATION_START:
                raise ProtocolError(f"{self.id} expected iteration_start, got {message.kind!r}")
            self._phase_compute_with(message)
            self.phase_emit()

    def _phase_compute_with(self, start: Message) -> None:
        iteration = int(start.payload["iteration"])
        if self._next_clip_bound is not None:
            self.clip_bound = self._next_clip_bound
            self._next_clip_bound = None
        mask_msg = self.network.receive(self.id, {KIND_MASK})
        if int(mask_msg.payload["iteration"]) != iteration:
            raise SynchronizationError(f"{self.id} got a mask for the wrong iteration")
        model = self._current_model()
        indices = round_robin_indices(len(self._shard), self.config.batch_size, iteration)
        batch = self._shard.take(indices)
        if self._trace is not None:
            self._trace.record(iteration, f"batch_indices/{self.id}", indices.copy())
        grads = self._run_plugin(iteration, model, batch)
        histogram_requested = bool(start.payload["histogram_requested"])
        if histogram_requested:
            hist = build_norm_histogram(grads, self.config.privacy.bin_edges)
            self.network.send(
                self.id, ADMIN_ID, KIND_HISTOGRAM,
                {"iteration": iteration, "edges": hist.bin_edges, "counts": hist.counts, "total": hist.total},
            )
        self._pending = {
            "iteration": iteration,
            "grads": grads,
            "mask": mask_msg.payload["vector"],
            "mean_loss": mean_loss(model, batch),
            "batch_size": len(batch),
            "await_bound": histogram_requested,
        }


class ModelUpdater:
    """The model owner's aggregation component."""

    def __init__(self, config: SessionConfig, store, network, model_key, test_key, trace=None):
        self.id = UPDATER_ID
        self.config = config
        self.store = store
        self.network = network
        self._model_key = model_key
        self._test_key = test_key
        self._trace = trace
        self.model = None
        self.test_batch = None
        self.last_accuracy = 0.0

    def load_assets(self) -> None:
        self.model = checkpoint_loads(open_asset(self.store.get("model"), self._model_key).decode())
        payload = decode_payload(open_asset(self.store.get("testset"), self._test_key))
        self.test_batch = Batch(payload["features"], payload["labels"])

    def announce(self) -> None:
        self.network.send(self.id, ADMIN_ID, KIND_REGISTER, {"component": "model_updater", "index": 0})

    def apply_payloads(self, vectors, batch_total: int):
        """Sum masked payloads, take one model step, return the aggregate."""
        aggregate = np.zeros(self.model.parameter_count)
        for v in vectors:
            aggregate += v
        self.model = apply_update(self.model, aggregate, self.config.learning_rate, batch_total)
        return aggregate

    def step_iteration(self) -> None:
        self._step_with(self.network.receive(self.id, {KIND_ITERATION_START}))

    def run_loop(self) -> None:
        while True:
            message = self.network.receive(self.id)
            if message.kind == KIND_STOP:
                return
            if message.kind != KIND_ITERATION_START:
                raise ProtocolError(f"{self.id} expected iteration_start, got {message.kind!r}")
            self._step_with(message)

    def _step_with(self, start: Message) -> None:
        iteration = int(start.payload["iteration"])
        if self._trace is not None:
            self._trace.record(iteration, "model_before", flatten_params(self.model))
        payloads = {}
        for _ in range(self.config.num_workers):
            message = self.network.receive(self.id, {KIND_MASKED_GRADIENT})
            if int(message.payload["iteration"]) != iteration:
                raise SynchronizationError(
                    f"payload for iteration {message.payload['iteration']} during iteration {iteration}"
                )
            if message.sender in payloads:
                raise SynchronizationError(
                    f"duplicate payload from {message.sender} at iteration {iteration}"
                )
            payloads[message.sender] = message.payload
        expected = {worker_id(i) for i in range(self.config.num_workers)}
        if set(payloads) != expected:
            raise SynchronizationError(f"missing payloads from {sorted(expected - set(payloads))}")

        ordered = [payloads[worker_id(i)] for i in range(self.config.num_workers)]
        batch_total = sum(int(p["batch_size"]) for p in ordered)
        aggregate = self.apply_payloads([p["vector"] for p in ordered], batch_total)
        train_loss = (
            sum(float(p["mean_loss"]) * int(p["batch_size"]) for p in ordered) / batch_total
        )
        if iteration == 1 or iteration % self.config.evaluation_cadence == 0:
            self.last_accuracy = accuracy(self.model, self.test_batch)
        self.store.put("model", seal_asset(checkpoint_dumps(self.model).encode(), self._model_key))
        if self._trace is not None:
            self._trace.record(iteration, "aggregate", aggregate.copy())
        self.network.send(
            self.id, ADMIN_ID, KIND_UPDATE_RESULT,
            {"iteration": iteration, "accuracy": self.last_accuracy, "train_loss": train_loss},
        )


class Admin:
    """Coordinator: notifies components, owns the noise and the ledger."""

    def __init__(self, config: SessionConfig, network, rng, trace=None):
        self.id = ADMIN_ID
        self.config = config
        self.network = network
        self.rng = rng
        self._trace = trace
        self.clip_bound = config.privacy.clip_bound
        self.step_multiplier = per_step_sigma(config.privacy.sigma, config.privacy.lam)
        self.noise_state = NoiseCorrectionState(lam=config.privacy.lam, step_sigma=0.0)
        self.ledger = CompositionLedger()
        self.report = TrainingReport()
        self.param_dim = parameter_count(config.model.layer_dims)
        self.private = config.privacy.sigma > 0

    def await_registrations(self) -> None:
        seen = set()
        for _ in range(self.config.num_workers + 1):
            message = self.network.receive(self.id, {KIND_REGISTER})
            if message.sender in seen:
                raise SynchronizationError(f"duplicate registration from {message.sender}")
            seen.add(message.sender)

    def _histogram_round(self, iteration: int) -> bool:
        return self.config.dynamic_clipping.enabled and (iteration - 1) % self.config.dynamic_clipping.cadence == 0

    def iteration_events(self, iteration: int):
        """Ledger events one iteration will cost (empty for non-private runs)."""
        if not self.private:
            return []
        events = [GaussianEvent(1.0, self.config.privacy.sigma, 1)]
        if self._histogram_round(iteration):
            events.append(GaussianEvent(math.sqrt(2.0), self.config.privacy.sigma_g, 1))
        return events

    def _aggregate_histograms(self, iteration: int) -> None:
        hists, senders = [], set()
        for _ in range(self.config.num_workers):
            message = self.network.receive(self.id, {KIND_HISTOGRAM})
            if int(message.payload["iteration"]) != iteration:
                raise SynchronizationError("histogram for the wrong iteration")
            if message.sender in senders:
                raise SynchronizationError(f"duplicate histogram from {message.sender}")
            senders.add(message.sender)
            hists.append(
                NormHistogram(
                    bin_edges=message.payload["edges"],
                    counts=message.payload["counts"],
                    total=int(message.payload["total"]),
                )
            )
        noisy = aggregate_histograms(hists, self.config.privacy.sigma_g, self.rng)
        bound = select_clip_bound(noisy, self.config.unclipped_fraction)
        self.clip_bound = bound  # applies from the next iteration
        for i in range(self.config.num_workers):
            self.network.send(
                self.id, worker_id(i), KIND_CLIP_BOUND, {"iteration": iteration, "bound": bound}
            )

    def run(self, sequential_parts=None) -> TrainingReport:
        """Drive the training loop; with sequential_parts=(workers, updater)
        the components are stepped inline, otherwise their threads react."""
        workers, updater = sequential_parts if sequential_parts else (None, None)
        stop_reason = None
        for iteration in range(1, self.config.max_iterations + 1):
            events = self.iteration_events(iteration)
            if self.private:
                hypothetical = self.ledger.copy()
                hypothetical.extend(events)
                _, exceeded = budget_spent(hypothetical, self.config.budget)
                if exceeded:
                    stop_reason = STOP_BUDGET_EXHAUSTED
                    break

            hist_round = self._histogram_round(iteration)
            bound = self.clip_bound
            self.noise_state = self.noise_state.with_step_sigma(self.step_multiplier * bound)
            effective, self.noise_state = next_effective_noise(self.noise_state, self.param_dim, self.rng)
            blinding_std = self.config.privacy.blinding_factor * self.config.privacy.sigma * bound
            mask_set = generate_masks(self.config.num_workers, effective, blinding_std, self.rng)
            if self._trace is not None:
                self._trace.record(iteration, "clip_bound", bound)
                self._trace.record(iteration, "effective_noise", effective.copy())

            self.network.send(self.id, UPDATER_ID, KIND_ITERATION_START, {"iteration": iteration})
            for i in range(self.config.num_workers):
                self.network.send(
                    self.id, worker_id(i), KIND_ITERATION_START,
                    {"iteration": iteration, "histogram_requested": hist_round},
                )
                self.network.send(
                    self.id, worker_id(i), KIND_MASK,
                    {"iteration": iteration, "vector": mask_set.masks[i]},
                )

            if workers is not None:
                for w in workers:
                    w.phase_compute()
            if hist_round:
                self._aggregate_histograms(iteration)
            if workers is not None:
                for w in workers:
                    w.phase_emit()
                updater.step_iteration()

            result = self.network.receive(self.id, {KIND_UPDATE_RESULT})
            if int(result.payload["iteration"]) != iteration:
                raise SynchronizationError("update result for the wrong iteration")
            self.ledger.extend(events)
            if self.private:
                epsilon, _ = budget_spent(self.ledger, self.config.budget)
            else:
                epsilon = math.inf
            self.report.append(
                ReportRow(
                    iteration=iteration,
                    loss=float(result.payload["train_loss"]),
                    accuracy=float(result.payload["accuracy"]),
                    clip_bound=bound,
                    epsilon=epsilon,
                )
            )
            target = self.config.stop.target_accuracy
            if target is not None and float(result.payload["accuracy"]) >= target:
                stop_reason = STOP_TARGET_ACCURACY
                break
        else:
            stop_reason = STOP_MAX_ITERATIONS

        self.report.stop_reason = stop_reason
        self.broadcast_stop(stop_reason)
        return self.report

    def broadcast_stop(self, reason: str) -> None:
        payload = {"reason": reason}
        for i in range(self.config.num_workers):
            self.network.send(self.id, worker_id(i), KIND_STOP, payload)
        self.network.send(self.id, UPDATER_ID, KIND_STOP, payload)


# --- session assembly ----------------------------------------------------


def derive_session_keys(config: SessionConfig) -> dict:
    """Deterministic per-session keys, standing in for owner-chosen keys."""
    seed = hashlib.sha256(config.canonical_bytes()).digest()

    def kdf(label: str) -> bytes:
        return hashlib.sha256(b"dpcollab-key\x00" + seed + b"\x00" + label.encode()).digest()

    keys = {"transport": kdf("transport"), "model": kdf("model"), "testset": kdf("testset")}
    for i in range(config.num_workers):
        keys[f"shard-{i}"] = kdf(f"shard-{i}")
    return keys


def _check_batch(batch: Batch, config: SessionConfig, name: str) -> None:
    if batch.features.shape[1] != config.model.layer_dims[0]:
        raise ConfigurationError(
            f"{name}: feature width {batch.features.shape[1]} != model input {config.model.layer_dims[0]}"
        )
    if batch.labels.max() >= config.model.layer_dims[-1]:
        raise ConfigurationError(f"{name}: label {batch.labels.max()} outside the model's classes")


def prepare_session(config: SessionConfig, store=None, kds=None):
    """Seal all assets into the store and register keys with the KDS.

    This is the dataset/model owners' side of the workflow; run_session is
    the service side and assumes this has happened.
    """
    store = store if store is not None else AssetStore()
    kds = kds if kds is not None else KeyDistributionService()
    keys = derive_session_keys(config)

    for i, ref in enumerate(config.worker_datasets):
        batch = resolve_dataset(ref)
        _check_batch(batch, config, f"worker {i} shard")
        blob = encode_payload({"features": batch.features, "labels": batch.labels})
        store.put(f"shard-{i}", seal_asset(blob, keys[f"shard-{i}"]))
    test_batch = resolve_dataset(config.test_dataset)
    _check_batch(test_batch, config, "test set")
    store.put(
        "testset",
        seal_asset(encode_payload({"features": test_batch.features, "labels": test_batch.labels}), keys["testset"]),
    )
    model = init_mlp(config.model.layer_dims, config.model.init_seed)
    store.put("model", seal_asset(checkpoint_dumps(model).encode(), keys["model"]))

    def record(key_id: str, key: bytes, measurement) -> None:
        kds.register(KeyRecord(key_id, bytearray(key), measurement, config.session_id))

    admin_m = attest("admin", CODE_VERSION, config)
    record("transport/admin", keys["transport"], admin_m)
    for i in range(config.num_workers):
        m = attest(f"data_handler/{i}", CODE_VERSION, config)
        record(f"transport/worker-{i}", keys["transport"], m)
        record(f"shard/worker-{i}", keys[f"shard-{i}"], m)
        record(f"model/worker-{i}", keys["model"], m)
    updater_m = attest("model_updater", CODE_VERSION, config)
    record("transport/updater", keys["transport"], updater_m)
    record("model/updater", keys["model"], updater_m)
    record("testset/updater", keys["testset"], updater_m)
    return store, kds


def _fetch_key(kds, component: str, key_id: str, measurement) -> bytes:
    response = kds.request(key_id, measurement)
    if not response.granted:
        raise ProtocolAbort(component, 0, f"key {key_id!r} denied: {response.reason}")
    return response.key


def run_session(config: SessionConfig, store, kds, scheduler: str = "sequential", plugin_factory=None, trace=None, receive_timeout: float = 30.0) -> TrainingReport:
    """Execute one full training session and return its report.

    scheduler is "sequential" (deterministic, default) or "concurrent"
    (thread per component, same message protocol). plugin_factory maps a
    worker index to a gradient plugin; None selects the built-in backprop
    plugin for every worker.
    """
    if scheduler not in ("sequential", "concurrent"):
        raise ConfigurationError(f"unknown scheduler {scheduler!r}")
    concurrent = scheduler == "concurrent"

    admin_m = attest("admin", CODE_VERSION, config)
    transport = _fetch_key(kds, ADMIN_ID, "transport/admin", admin_m)
    worker_keys = []
    for i in range(config.num_workers):
        m = attest(f"data_handler/{i}", CODE_VERSION, config)
        t_i = _fetch_key(kds, worker_id(i), f"transport/worker-{i}", m)
        if t_i != transport:
            raise ProtocolError("transport key copies disagree")
        shard_key = _fetch_key(kds, worker_id(i), f"shard/worker-{i}", m)
        model_key = _fetch_key(kds, worker_id(i), f"model/worker-{i}", m)
        worker_keys.append((shard_key, model_key))
    updater_m = attest("model_updater", CODE_VERSION, config)
    t_u = _fetch_key(kds, UPDATER_ID, "transport/updater", updater_m)
    if t_u != transport:
        raise ProtocolError("transport key copies disagree")
    updater_model_key = _fetch_key(kds, UPDATER_ID, "model/updater", updater_m)
    test_key = _fetch_key(kds, UPDATER_ID, "testset/updater", updater_m)

    network = Network(transport, concurrent=concurrent, receive_timeout=receive_timeout)
    if trace is not None:
        trace.network = network
    network.register(ADMIN_ID)
    for i in range(config.num_workers):
        network.register(worker_id(i))
    network.register(UPDATER_ID)

    rng = np.random.default_rng(config.seed)
    admin = Admin(config, network, rng, trace)
    workers = []
    for i in range(config.num_workers):
        handler = DataHandler(i, config, store, network, *worker_keys[i], trace=trace)
        if plugin_factory is not None:
            plugin = plugin_factory(i)
            if plugin is not None:
                handler.register_plugin(plugin)
        workers.append(handler)
    updater = ModelUpdater(config, store, network, updater_model_key, test_key, trace)

    for handler in workers:
        handler.load_assets()
    updater.load_assets()
    for handler in workers:
        handler.announce()
    updater.announce()
    admin.await_registrations()

    if not concurrent:
        return admin.run((workers, updater))

    errors = []

    def guarded(component, fn):
        def runner():
            try:
                fn()
            except Exception as exc:  # noqa: BLE001 - forwarded to the caller
                errors.append((component, exc))

        return runner

    threads = [
        threading.Thread(target=guarded(w.id, w.run_loop), name=w.id, daemon=True) for w in workers
    ]
    threads.append(
        threading.Thread(target=guarded(UPDATER_ID, updater.run_loop), name=UPDATER_ID, daemon=True)
    )
    for thread in threads:
        thread.start()
    try:
        report = admin.run(None)
    except Exception as admin_exc:
        # Unblock any still-waiting actor threads before surfacing the error.
        try:
            admin.broadcast_stop("aborted")
        except Exception:
            pass
        if errors:
            raise errors[0][1] from admin_exc
        raise
    finally:
        for thread in threads:
            thread.join(timeout=receive_timeout)
    if errors:
        raise errors[0][1]
    return report
