"""Discrete-event session simulator and onload/offload strategy comparison.

One session replays a scenario's frames in timestamp order through
detector -> decision support -> vault -> outbound queue -> agent. The
simulated clock is integer milliseconds taken from frame timestamps, so a
run is a pure function of (scenario, strategy, device).

Under the *onload* strategy inference happens on the device and only sealed
envelopes (plus metadata-only text fallbacks) leave it. Under *offload* every
raw frame is shipped to an edge node for inference; detection and decision
logic are otherwise identical so only latency and traffic differ.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics, vault
from .agent import AgentService
from .detector import (
    DEFAULT_DIM,
    DEFAULT_INFERENCE_MS,
    DetectionClass,
    DetectorProfile,
    SceneFrame,
    ScriptedDetector,
    ToyDetector,
    TruthLabel,
)
from .dss import ActionKind, DecisionSupport, DssConfig, strongest_hit
from .errors import ConsentWithheld, InvalidScenario
from .transport import DEFAULT_DEADLINE_MS, LinkInterval, LinkModel, OutboundQueue

DEFAULT_PAYLOAD_BYTES = 120_000
DEFAULT_EPOCH_MS = 1_700_000_000_000
DEFAULT_KEY = vault.EncryptionKey(hashlib.sha256(b"edgewatch/default-key").digest()[:16], key_id=1)
DRAIN_STEP_MS = 100


@dataclass(frozen=True)
class ReferenceLatency:
    system: str
    latency_ms: int
    media: str


# Published average latencies of earlier ridesharing media-processing systems
# as reported by their authors. Cited for comparison only, never
# recomputed.
REFERENCE_LATENCIES = (
    ReferenceLatency("L. Liu et al. (2018)", 1273, "Sound"),
    ReferenceLatency("L. Wang et al. (2019)", 8345, "A 60-second video data"),
    ReferenceLatency("Long et al. (2017)", 2234, "Compressed Videos"),
    ReferenceLatency("Ran et al. (2018)", 32100, "video chunk S=1MB, 15 edge nodes"),
    ReferenceLatency("On-device monitoring (this pipeline)", 620, "Scene view stream"),
)


class StrategyKind(str, enum.Enum):
    ONLOAD = "onload"
    OFFLOAD = "offload"


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind = StrategyKind.ONLOAD
    frame_bytes: int = 1_000_000
    bandwidth_bytes_per_s: float = 1_000_000
    rtt_ms: float = 50.0
    edge_inference_ms: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.kind is StrategyKind.OFFLOAD:
            if not (self.frame_bytes > 0 and self.bandwidth_bytes_per_s > 0
                    and self.rtt_ms > 0 and self.edge_inference_ms > 0):
                raise ValueError("offload parameters must be positive")

    @classmethod
    def onload(cls) -> "Strategy":
        return cls(StrategyKind.ONLOAD)

    @classmethod
    def offload(cls, **params) -> "Strategy":
        return cls(StrategyKind.OFFLOAD, **params)

    @property
    def label(self) -> str:
        return self.kind.value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True)
class DeviceProfile:
    name: str = "default"
    inference_ms: float = DEFAULT_INFERENCE_MS
    # published end-to-end latency for the handset, informational only
    reference_latency_ms: float | None = None

    def __post_init__(self):
        if not self.inference_ms > 0:
            raise ValueError("inference_ms must be positive")


DEVICE_PRESETS = {
    "default": DeviceProfile("default", DEFAULT_INFERENCE_MS),
    "s10plus": DeviceProfile("s10plus", DEFAULT_INFERENCE_MS, 920.0),
    # slower handset: inference scaled by the published end-to-end ratio
    "lgv30": DeviceProfile("lgv30", round(DEFAULT_INFERENCE_MS * 1297 / 920, 2), 1297.0),
}


def frame_latency(strategy: Strategy, device: DeviceProfile, frame: SceneFrame | None = None) -> float:
    """Per-frame detection latency in ms for the given placement."""
    if strategy.kind is StrategyKind.ONLOAD:
        return float(device.inference_ms)
    transmit = strategy.frame_bytes / strategy.bandwidth_bytes_per_s * 1000.0
    return transmit + strategy.rtt_ms + strategy.edge_inference_ms


def _session_bytes(value) -> bytes:
    if isinstance(value, bytes):
        if len(value) != 16:
            raise InvalidScenario("session_id must be 16 bytes")
        return value
    text = str(value)
    try:
        raw = bytes.fromhex(text)
        if len(raw) == 16:
            return raw
    except ValueError:
        pass
    # free-form ids are hashed down to 16 bytes
    return hashlib.md5(text.encode()).digest()


@dataclass(frozen=True)
class Scenario:
    session_id: bytes
    vehicle_id: str
    frames: tuple[SceneFrame, ...]
    consent: bool = True
    seed: int = 0
    detector: dict = field(default_factory=dict)
    link: LinkModel = field(default_factory=LinkModel.always_up)
    strategy_defaults: dict = field(default_factory=dict)
    dss: DssConfig = field(default_factory=DssConfig)
    payload_bytes: int = DEFAULT_PAYLOAD_BYTES
    epoch_ms: int = DEFAULT_EPOCH_MS
    deadline_ms: int = DEFAULT_DEADLINE_MS
    key: vault.EncryptionKey = DEFAULT_KEY

    def __post_init__(self):
        object.__setattr__(self, "session_id", _session_bytes(self.session_id))
        object.__setattr__(self, "frames", tuple(self.frames))
        for a, b in zip(self.frames, self.frames[1:]):
            if b.t_ms <= a.t_ms:
                raise InvalidScenario(
                    f"frame {b.frame_id} at {b.t_ms} ms is not after frame {a.frame_id}"
                )
        if self.payload_bytes < 0:
            raise InvalidScenario("payload_bytes must be non-negative")

    @property
    def detector_profile(self) -> DetectorProfile:
        keys = ("inference_ms", "noise_sigma", "night_penalty", "latency_jitter")
        return DetectorProfile(**{k: self.detector[k] for k in keys if k in self.detector})

    def build_detector(self):
        kind = self.detector.get("kind", "scripted")
        profile = self.detector_profile
        if kind == "scripted":
            return ScriptedDetector(profile, self.detector.get("base_confidence", 0.9))
        if kind == "toy":
            return ToyDetector(
                weights=self.detector["weights"],
                bias=self.detector.get("bias", 0.0),
                mode=self.detector.get("mode", "float"),
                threshold=self.dss.confidence_threshold,
                profile=profile,
            ).fit()
        raise InvalidScenario(f"unknown detector kind {kind!r}")

    def offload_strategy(self) -> Strategy:
        return Strategy.offload(**self.strategy_defaults)

    # JSON scenario files

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            frames = [
                SceneFrame(
                    frame_id=int(f["frame_id"]),
                    t_ms=int(f["t_ms"]),
                    lighting=f.get("lighting", "day"),
                    features=f.get("features", ()),
                    truth=[
                        TruthLabel(t["class"], tuple(t.get("bbox", (0, 0, 1, 1))),
                                   t.get("confidence"))
                        for t in f.get("truth") or ()
                    ],
                )
                for f in d["frames"]
            ]
            schedule = d.get("link_schedule")
            if schedule is None:
                link = LinkModel.always_up()
            else:
                link = LinkModel([_interval(iv) for iv in schedule])
            extra = {}
            if "key" in d:
                extra["key"] = vault.EncryptionKey.from_hex(d["key"]["key_hex"], d["key"].get("key_id", 0))
            for name in ("payload_bytes", "epoch_ms", "deadline_ms"):
                if name in d:
                    extra[name] = int(d[name])
            return cls(
                session_id=d["session_id"],
                vehicle_id=str(d["vehicle_id"]),
                consent=bool(d.get("consent", True)),
                seed=int(d.get("seed", 0)),
                detector=dict(d.get("detector_profile") or {}),
                link=link,
                strategy_defaults=dict(d.get("strategy_defaults") or {}),
                dss=DssConfig(**(d.get("dss") or {})),
                frames=frames,
                **extra,
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidScenario):
                raise
            raise InvalidScenario(f"bad scenario: {exc!r}") from exc

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id.hex(),
            "vehicle_id": self.vehicle_id,
            "consent": self.consent,
            "seed": self.seed,
            "detector_profile": dict(self.detector),
            "link_schedule": [
                [iv[0], None if math.isinf(iv[1]) else iv[1], iv[2], iv[3]]
                for iv in self.link.to_list()
            ],
            "strategy_defaults": dict(self.strategy_defaults),
            "dss": asdict(self.dss),
            "payload_bytes": self.payload_bytes,
            "epoch_ms": self.epoch_ms,
            "deadline_ms": self.deadline_ms,
            "key": {"key_hex": self.key.key_bytes.hex(), "key_id": self.key.key_id},
            "frames": [
                {
                    "frame_id": f.frame_id,
                    "t_ms": f.t_ms,
                    "lighting": f.lighting.value,
                    "features": list(f.features),
                    "truth": [
                        {"class": t.cls.label, "bbox": list(t.bbox),
                         **({"confidence": t.confidence} if t.confidence is not None else {})}
                        for t in f.truth
                    ],
                }
                for f in self.frames
            ],
        }


def _interval(iv) -> LinkInterval:
    if isinstance(iv, dict):
        iv = (iv["from_ms"], iv.get("to_ms"), iv["bandwidth_bytes_per_s"], iv["rtt_ms"])
    start, end, bw, rtt = iv
    return LinkInterval(int(start), math.inf if end is None else end, float(bw), float(rtt))


def load_scenario(path) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text()))


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=1) + "\n")


def frame_seed(seed: int, frame_id: int) -> int:
    return int(np.random.SeedSequence([seed, frame_id]).generate_state(1)[0])


def capture_payload(scenario: Scenario, frame: SceneFrame) -> bytes:
    """Simulated camera capture for ``frame``: deterministic pseudo-random bytes."""
    rng = np.random.default_rng([scenario.seed, frame.frame_id, 0xCA11])
    return rng.bytes(scenario.payload_bytes)


@dataclass
class SessionReport:
    session_id: str
    vehicle_id: str
    strategy: dict
    device: str
    consent_withheld: bool = False
    frames: int = 0
    frame_latencies_ms: list = field(default_factory=list)
    latency: dict | None = None
    inference_latency: dict | None = None
    warnings: int = 0
    warn_log: list = field(default_factory=list)
    incidents_recorded: int = 0
    incidents_delivered: int = 0
    incidents_pending: int = 0
    recorded_frame_ids: list = field(default_factory=list)
    delivered_envelope_ids: list = field(default_factory=list)
    agent_incident_ids: list = field(default_factory=list)
    stored_files: list = field(default_factory=list)
    transfers: list = field(default_factory=list)
    raw_frame_bytes: int = 0
    envelope_bytes: int = 0
    fallback_records: int = 0
    fallback_payload_bytes: int = 0
    fallback_bytes: int = 0
    sms_log: list = field(default_factory=list)
    confusion: dict = field(default_factory=lambda: metrics.ConfusionMatrix().to_dict())
    scores: dict | None = None

    @property
    def bytes_off_device(self) -> int:
        return self.raw_frame_bytes + self.envelope_bytes + self.fallback_bytes

    @property
    def mean_latency_ms(self) -> float | None:
        return self.latency["mean_ms"] if self.latency else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bytes_off_device"] = self.bytes_off_device
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> dict:
        """Flat one-row view for CSV output (per-frame lists omitted)."""
        d = self.to_dict()
        for key in ("frame_latencies_ms", "warn_log", "sms_log", "transfers", "stored_files",
                    "delivered_envelope_ids", "agent_incident_ids", "recorded_frame_ids"):
            d.pop(key)
        return d


def run_session(scenario: Scenario, strategy: Strategy | None = None,
                device: DeviceProfile | None = None, *, agent: AgentService | None = None,
                store_root=None, wire_tap: Callable[[str, bytes], None] | None = None,
                drain: bool = True) -> SessionReport:
    """Simulate one monitored ride and tally latency, traffic and incidents.

    ``agent`` defaults to a fresh in-memory service holding the scenario key.
    ``store_root`` is where the device-side hidden incident folder is created
    (a temporary directory when omitted). ``wire_tap(channel, data)`` sees
    every byte string that leaves the device over the uplink ("upload") or
    the text fallback channel ("sms").

    Raises :class:`ConsentWithheld` (carrying an empty, flagged report in
    ``exc.report``) when the scenario lacks consent.
    """
    strategy = strategy or Strategy.onload()
    device = device or DEVICE_PRESETS["default"]
    report = SessionReport(
        session_id=scenario.session_id.hex(),
        vehicle_id=scenario.vehicle_id,
        strategy=strategy.to_dict(),
        device=device.name,
    )
    if not scenario.consent:
        report.consent_withheld = True
        exc = ConsentWithheld(f"session {report.session_id} has no monitoring consent")
        exc.report = report
        raise exc

    if store_root is None:
        with tempfile.TemporaryDirectory(prefix="edgewatch-") as tmp:
            return _simulate(scenario, strategy, device, report, agent, tmp, wire_tap, drain)
    return _simulate(scenario, strategy, device, report, agent, store_root, wire_tap, drain)


def _simulate(scenario, strategy, device, report, agent, store_root, wire_tap, drain):
    sid = scenario.session_id
    detector = scenario.build_detector()
    frames = scenario.frames
    dsm = DecisionSupport(sid, scenario.dss, start_ms=frames[0].t_ms if frames else 0)
    if agent is None:
        agent = AgentService([scenario.key])
    agent.bind_session(sid, scenario.vehicle_id)
    store = vault.IncidentStore(store_root)
    queue = OutboundQueue(deadline_ms=scenario.deadline_ms)
    link = scenario.link
    offload = strategy.kind is StrategyKind.OFFLOAD

    clock = {"now": 0}
    samples = []
    matrix = metrics.ConfusionMatrix()

    def sink(data: bytes) -> None:
        if wire_tap is not None:
            wire_tap("upload", data)
        incident_id = agent.ingest(data, received_at_ms=scenario.epoch_ms + int(clock["now"]))
        report.agent_incident_ids.append(incident_id)

    def advance(now, budget):
        clock["now"] = now
        transfers, fallbacks = queue.tick(link, now, sink, budget_ms=budget)
        for t in transfers:
            report.incidents_delivered += 1
            report.envelope_bytes += t.bytes
            report.delivered_envelope_ids.append(t.envelope_id)
            report.transfers.append({
                "envelope_id": t.envelope_id,
                "latency_ms": t.latency_ms,
                "bytes": t.bytes,
                "started_at_ms": t.started_at_ms,
                "queued_ms": t.queued_ms,
            })
            samples.append(metrics.LatencySample("upload", t.latency_ms))
        for rec in fallbacks:
            line = rec.line()
            if wire_tap is not None:
                wire_tap("sms", line.encode())
            report.fallback_records += 1
            report.fallback_payload_bytes += rec.payload_bytes
            report.fallback_bytes += len(line.encode())
            report.sms_log.append(line)

    for i, frame in enumerate(frames):
        detections, inference_ms = detector.detect(frame, frame_seed(scenario.seed, frame.frame_id))
        latency = frame_latency(strategy, device, frame)
        if offload:
            inference_ms = strategy.edge_inference_ms
        report.frame_latencies_ms.append(latency)
        lighting = frame.lighting.value
        samples.append(metrics.LatencySample("inference", inference_ms, lighting))
        samples.append(metrics.LatencySample("end_to_end", latency, lighting))
        if offload:
            report.raw_frame_bytes += strategy.frame_bytes

        predicted = strongest_hit(detections, scenario.dss.confidence_threshold) is not None
        matrix = metrics.update(matrix, predicted, frame.has_violation)

        action = dsm.observe(frame, detections)
        if action.kind is ActionKind.RECORD_INCIDENT:
            meta = vault.IncidentMeta(sid, scenario.epoch_ms + frame.t_ms,
                                      DetectionClass.VIOLATION, action.detection.confidence)
            envelope = vault.seal_incident(capture_payload(scenario, frame), meta, scenario.key)
            path = store.store_incident(envelope, frame.frame_id)
            report.stored_files.append(path.name)
            queue.enqueue(envelope, frame.t_ms)
            report.incidents_recorded += 1
            report.recorded_frame_ids.append(frame.frame_id)

        budget = frames[i + 1].t_ms - frame.t_ms if i + 1 < len(frames) else 0
        advance(frame.t_ms, budget)

    if drain and frames:
        _drain(queue, link, frames[-1].t_ms, advance)

    report.frames = len(frames)
    report.warnings = len(dsm.log)
    report.warn_log = list(dsm.log)
    report.incidents_pending = len(queue)
    report.confusion = matrix.to_dict()
    try:
        report.scores = asdict(metrics.scores(matrix))
    except ZeroDivisionError:
        report.scores = None
    if frames:
        report.latency = asdict(metrics.latency_stats(samples, kind="end_to_end"))
        report.inference_latency = asdict(metrics.latency_stats(samples, kind="inference"))
    return report


def _drain(queue: OutboundQueue, link: LinkModel, t: int, advance) -> None:
    """Keep ticking after the last frame until the queue empties or the link
    schedule offers no further up-time."""
    while len(queue):
        t += DRAIN_STEP_MS
        if not link.is_up(t):
            nxt = link.next_up(t)
            if nxt is None:
                # link never returns: still let the text fallback fire
                advance(t + queue.deadline_ms + 1, 0)
                return
            # jump across the outage, stopping where a fallback may come due
            t_fallback = t + queue.deadline_ms + 1
            if nxt > t_fallback:
                advance(t_fallback, 0)
            t = int(math.ceil(nxt))
        advance(t, DRAIN_STEP_MS)


@dataclass
class ComparisonRow:
    label: str
    strategy: dict
    device: str
    mean_latency_ms: float | None
    p95_latency_ms: float | None
    bytes_off_device: int
    raw_frame_bytes: int
    envelope_bytes: int
    incidents_recorded: int
    incidents_delivered: int


@dataclass
class ComparisonReport:
    session_id: str
    rows: list
    references: list = field(
        default_factory=lambda: [asdict(r) for r in REFERENCE_LATENCIES]
    )

    def row(self, label: str) -> ComparisonRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "rows": [asdict(r) for r in self.rows],
            "references": list(self.references),
        }


def compare_strategies(scenario: Scenario, strategies, devices=None) -> ComparisonReport:
    """Run the scenario once per (strategy, device) pair, side by side.

    ``strategies`` is a list of :class:`Strategy`; ``devices`` is a parallel
    list of :class:`DeviceProfile` (default device for all when omitted).
    Alternatively ``strategies`` may already be a list of pairs.
    """
    strategies = list(strategies)
    if devices is None:
        if strategies and isinstance(strategies[0], tuple):
            pairs = strategies
        else:
            pairs = [(s, DEVICE_PRESETS["default"]) for s in strategies]
    else:
        devices = list(devices)
        if len(devices) != len(strategies):
            raise ValueError("strategies and devices must pair up one-to-one")
        pairs = list(zip(strategies, devices))
    if len(pairs) < 2:
        raise ValueError("a comparison needs at least two (strategy, device) pairs")

    rows = []
    for strategy, device in pairs:
        rep = run_session(scenario, strategy, device)
        latency = rep.latency or {}
        rows.append(ComparisonRow(
            label=f"{strategy.label}@{device.name}",
            strategy=strategy.to_dict(),
            device=device.name,
            mean_latency_ms=latency.get("mean_ms"),
            p95_latency_ms=latency.get("p95"),
            bytes_off_device=rep.bytes_off_device,
            raw_frame_bytes=rep.raw_frame_bytes,
            envelope_bytes=rep.envelope_bytes,
            incidents_recorded=rep.incidents_recorded,
            incidents_delivered=rep.incidents_delivered,
        ))
    return ComparisonReport(scenario.session_id.hex(), rows)


def synthetic_scenario(seed: int = 0, n_frames: int = 60, interval_ms: int = 1000,
                       episodes=((20, 3),), dim: int = DEFAULT_DIM, night_from: int | None = None,
                       link_schedule=None, detector=None, consent: bool = True,
                       payload_bytes: int = DEFAULT_PAYLOAD_BYTES, **kwargs) -> Scenario:
    """Generate a scenario with violation ``episodes`` given as
    ``(first_frame, length)`` pairs; every other frame shows a driver and
    passenger only."""
    rng = np.random.default_rng(seed)
    violating = {i for start, length in episodes for i in range(start, start + length)}
    frames = []
    for i in range(n_frames):
        truth = [TruthLabel("Driver", (0.05, 0.1, 0.4, 0.8)),
                 TruthLabel("Passenger", (0.55, 0.1, 0.4, 0.8))]
        if i in violating:
            truth.append(TruthLabel("Violation", (0.3, 0.2, 0.4, 0.6)))
        lighting = "night" if night_from is not None and i >= night_from else "day"
        frames.append(SceneFrame(i, i * interval_ms, lighting,
                                 tuple(rng.normal(size=dim).round(6)), tuple(truth)))
    session = hashlib.md5(f"synthetic-{seed}".encode()).digest()
    return Scenario(
        session_id=session,
        vehicle_id=f"veh-{seed:04d}",
        frames=frames,
        consent=consent,
        seed=seed,
        detector=detector if detector is not None else {"kind": "scripted", "base_confidence": 0.9},
        link=LinkModel(link_schedule) if link_schedule is not None else LinkModel.always_up(),
        payload_bytes=payload_bytes,
        **kwargs,
    )
