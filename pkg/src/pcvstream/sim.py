"""Trace-driven streaming simulator: synthetic scenes, bandwidth traces,
device models, the per-frame encode/transmit/decode timeline, and policy
comparison reports.

One session is strictly sequential and fully seeded, so identical inputs
produce byte-identical logs. Per-block codec costs come from a model
registry built offline (costs are measured once and persisted, never
re-measured inside a session).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import (
    Intrinsics, PointCloud, Pose, chamfer_distance, hausdorff_distance,
    quat_from_axis_angle,
)
from .codec import (
    CodecModel, chunk_blocks, decode, denormalize_block, deserialize, encode,
    normalize_block, octree_decode, octree_encode,
)
from .roi import PoseHistory, RoiConfig, select_roi
from .scheduler import (
    ActorCritic, RewardSpec, SchedulerState, build_state, select_action,
)

TRACE_PRESETS = {"3g": 2.0, "4g": 25.0, "wifi": 60.0, "5g": 100.0}
TRACE_INTERVAL_S = 0.5
TRACE_JITTER = 0.3

DEVICE_PRESETS = {  # CPU clocks 2.92/2.30/2.20 GHz normalized to device-3
    "device-1": 2.92 / 2.20,
    "device-2": 2.30 / 2.20,
    "device-3": 1.0,
}

LATENT_BYTES_PER_VALUE = 4          # f32 latents
BLOCK_HEADER_BYTES = 16             # centroid f32x3 + scale f32
OCTREE_ENCODE_S_PER_POINT = 2e-7    # fixed octree cost model (not measured)
OCTREE_DECODE_S_PER_POINT = 3e-7


@dataclass(frozen=True)
class NetworkTrace:
    """Piecewise-constant bandwidth curve (timestamps in seconds, Mbps)."""

    times: np.ndarray
    bandwidth_mbps: np.ndarray
    tag: str = "file"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        b = np.asarray(self.bandwidth_mbps, dtype=np.float64)
        if len(t) == 0 or len(t) != len(b):
            raise ValueError("trace needs matching, non-empty columns")
        if np.any(np.diff(t) < 0):
            raise ValueError("trace timestamps must be non-decreasing")
        if np.any(b <= 0):
            raise ValueError("trace bandwidth must be positive")
        t.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "bandwidth_mbps", b)

    @classmethod
    def preset(cls, name: str, duration_s: float = 120.0,
               seed: int = 0) -> "NetworkTrace":
        """Seeded +/-30% fluctuation every 0.5 s around the preset mean."""
        if name not in TRACE_PRESETS:
            raise ValueError(f"unknown preset '{name}'; "
                             f"choose from {sorted(TRACE_PRESETS)}")
        return cls.fluctuating(TRACE_PRESETS[name], duration_s, seed,
                               tag=name)

    @classmethod
    def fluctuating(cls, mean_mbps: float, duration_s: float = 120.0,
                    seed: int = 0, jitter: float = TRACE_JITTER,
                    interval_s: float = TRACE_INTERVAL_S,
                    tag: str = "file") -> "NetworkTrace":
        rng = np.random.default_rng(seed)
        t = np.arange(0.0, duration_s, interval_s)
        bw = mean_mbps * (1.0 + rng.uniform(-jitter, jitter, size=len(t)))
        return cls(t, bw, tag)

    @classmethod
    def constant(cls, mbps: float, tag: str = "file") -> "NetworkTrace":
        return cls(np.array([0.0]), np.array([mbps]), tag)

    @classmethod
    def from_csv(cls, path) -> "NetworkTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != \
                    ["t_seconds", "bandwidth_mbps"]:
                raise ValueError(
                    "trace CSV needs a 't_seconds,bandwidth_mbps' header")
            rows = [(float(a), float(b)) for a, b in reader]
        t, bw = zip(*rows)
        return cls(np.array(t), np.array(bw))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_seconds", "bandwidth_mbps"])
            for t, b in zip(self.times, self.bandwidth_mbps):
                writer.writerow([repr(float(t)), repr(float(b))])

    def bandwidth_at(self, t: float) -> float:
        """Bandwidth of the segment containing t (last segment extends)."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.bandwidth_mbps[max(0, i)])


def transmit_time(payload_bytes: float, trace: NetworkTrace,
                  start_t: float = 0.0) -> float:
    """Seconds to push the payload through the piecewise-constant trace,
    starting at start_t. The final trace segment extends indefinitely."""
    if payload_bytes < 0:
        raise ValueError("payload must be non-negative")
    bits = payload_bytes * 8.0
    if bits == 0.0:
        return 0.0
    t = start_t
    while True:
        i = int(np.searchsorted(trace.times, t, side="right")) - 1
        rate = float(trace.bandwidth_mbps[max(0, i)]) * 1e6
        if i + 1 >= len(trace.times):
            return t - start_t + bits / rate
        seg_end = float(trace.times[i + 1])
        window = max(0.0, seg_end - t)
        capacity = rate * window
        if bits <= capacity:
            return t - start_t + bits / rate
        bits -= capacity
        t = seg_end


@dataclass(frozen=True)
class DeviceModel:
    name: str
    compute_scale: float

    def __post_init__(self):
        if self.compute_scale <= 0:
            raise ValueError("compute_scale must be positive")

    @classmethod
    def preset(cls, name: str) -> "DeviceModel":
        if name not in DEVICE_PRESETS:
            raise ValueError(f"unknown device '{name}'; "
                             f"choose from {sorted(DEVICE_PRESETS)}")
        return cls(name, DEVICE_PRESETS[name])

    def decode_time(self, base_decode_s: float) -> float:
        return base_decode_s / self.compute_scale


# ---------------------------------------------------------------------------
# model registry

@dataclass
class RegistryEntry:
    model_id: str
    file: str
    latent_dim: int
    bits: int
    encode_cost_s: float   # per block, reference host
    decode_cost_s: float   # per block, reference host
    test_cd: float
    accuracy: float = 0.0  # normalized 1/CD, best model = 1

    def payload_per_block(self) -> int:
        return self.latent_dim * LATENT_BYTES_PER_VALUE + BLOCK_HEADER_BYTES


class ModelRegistry:
    """Trained codec models plus their offline measurements."""

    def __init__(self, root, entries=None):
        self.root = Path(root)
        self.entries: dict[str, RegistryEntry] = dict(entries or {})
        self._cache: dict[str, CodecModel] = {}

    def add(self, entry: RegistryEntry) -> None:
        self.entries[entry.model_id] = entry
        self._renormalize()

    def _renormalize(self):
        table = {k: 1.0 / e.test_cd for k, e in self.entries.items()}
        top = max(table.values())
        for k, e in self.entries.items():
            e.accuracy = table[k] / top

    def accuracy_table(self) -> dict:
        return {k: e.accuracy for k, e in self.entries.items()}

    def model(self, model_id: str) -> CodecModel:
        if model_id not in self._cache:
            entry = self.entries[model_id]
            self._cache[model_id] = deserialize(self.root / entry.file)
        return self._cache[model_id]

    def save(self, config: dict | None = None) -> None:
        payload = {
            "models": {k: {f: getattr(e, f) for f in (
                "file", "latent_dim", "bits", "encode_cost_s",
                "decode_cost_s", "test_cd", "accuracy")}
                for k, e in sorted(self.entries.items())},
            "config": config or {},
        }
        with open(self.root / "registry.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, root) -> "ModelRegistry":
        root = Path(root)
        with open(root / "registry.json") as fh:
            payload = json.load(fh)
        entries = {k: RegistryEntry(model_id=k, **v)
                   for k, v in payload["models"].items()}
        return cls(root, entries)


def measure_block_costs(model: CodecModel, repeats: int = 30,
                        seed: int = 0) -> tuple[float, float]:
    """Median per-block encode/decode wall time on this host.

    Run once when building a registry; sessions must read the stored
    numbers so that repeated runs stay byte-identical.
    """
    rng = np.random.default_rng(seed)
    block = normalize_block(rng.normal(size=(model.n_points, 3)))[0]
    latent = encode(model, block)
    enc_times, dec_times = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        encode(model, block)
        t1 = time.perf_counter()
        decode(model, latent)
        t2 = time.perf_counter()
        enc_times.append(t1 - t0)
        dec_times.append(t2 - t1)
    return float(np.median(enc_times)), float(np.median(dec_times))


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class Scene:
    frames: list            # PointCloud per frame
    subject_masks: list     # boolean array per frame (True = moving subject)
    poses: list             # camera Pose per frame
    intrinsics: Intrinsics


def _room_background(rng, points: int):
    """Floor plus two walls plus a few box obstacles, sampled uniformly."""
    width = rng.uniform(4.0, 6.0)
    depth = rng.uniform(4.0, 6.0)
    height = 2.5
    surfaces = [
        (np.array([0, 0, 0.0]), np.array([width, 0.05, depth])),   # floor
        (np.array([0, 0, 0.0]), np.array([width, height, 0.05])),  # back wall
        (np.array([0, 0, 0.0]), np.array([0.05, height, depth])),  # side wall
    ]
    for _ in range(int(rng.integers(2, 5))):  # furniture boxes
        size = rng.uniform([0.4, 0.4, 0.4], [1.2, 1.0, 1.2])
        corner = rng.uniform([0.3, 0.0, 0.3],
                             [width - 1.5, 0.0, depth - 1.5])
        surfaces.append((corner, size))
    areas = np.array([s[1][0] * s[1][2] + s[1][0] * s[1][1]
                      + s[1][1] * s[1][2] for s in surfaces])
    weights = areas / areas.sum()
    counts = rng.multinomial(points, weights)
    parts = []
    for (corner, size), cnt in zip(surfaces, counts):
        parts.append(corner + rng.uniform(0, 1, size=(cnt, 3)) * size)
    return np.concatenate(parts), width, depth


def _subject_blob(rng, points: int):
    """Articulated blob: body plus head plus two limbs, normalized scale."""
    segments = [
        (np.array([0.0, 0.9, 0.0]), np.array([0.18, 0.30, 0.12]), 0.50),
        (np.array([0.0, 1.35, 0.0]), np.array([0.09, 0.09, 0.09]), 0.15),
        (np.array([-0.22, 0.55, 0.0]), np.array([0.06, 0.35, 0.06]), 0.175),
        (np.array([0.22, 0.55, 0.0]), np.array([0.06, 0.35, 0.06]), 0.175),
    ]
    weights = np.array([s[2] for s in segments])
    counts = rng.multinomial(points, weights / weights.sum())
    parts = []
    for (center, radii, _), cnt in zip(segments, counts):
        parts.append(center + rng.normal(size=(cnt, 3)) * radii)
    return np.concatenate(parts)


def generate_scene(rooms: int = 5, frames: int = 100,
                   subject_points: int = 2000,
                   background_points: int = 18000, seed: int = 0) -> Scene:
    """Procedural rooms with one moving subject each; `frames` frames per
    room. Subject masks double as flow ground truth (background is static).
    """
    if frames < 2:
        raise ValueError("need at least 2 frames per room")
    rng = np.random.default_rng(seed)
    out = Scene([], [], [], Intrinsics(70.0, 1.6, 0.1, 60.0))
    frame_idx = 0
    for room in range(rooms):
        background, width, depth = _room_background(rng, background_points)
        subject = _subject_blob(rng, subject_points) \
            if subject_points > 0 else np.empty((0, 3))
        # smooth seeded path inside the room
        cx, cz = width / 2.0, depth / 2.0
        ax = rng.uniform(0.2 * width, 0.35 * width)
        az = rng.uniform(0.2 * depth, 0.35 * depth)
        w1 = rng.uniform(0.5, 1.5) * 2 * np.pi / max(frames, 1)
        phase = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.8, 1.2)
        cam_pos = np.array([cx, 1.5, -0.35 * depth])
        for f in range(frames):
            t = f * speed
            center = np.array([cx + ax * np.sin(w1 * t + phase), 0.0,
                               cz + az * np.sin(2 * w1 * t)])
            pts = background if len(subject) == 0 else \
                np.concatenate([background, subject + center])
            mask = np.zeros(len(pts), dtype=bool)
            mask[len(background):] = True
            out.frames.append(PointCloud(pts.astype(np.float32),
                                         frame_index=frame_idx))
            out.subject_masks.append(mask)
            # camera drifts laterally, always facing +z into the room
            cam = cam_pos + np.array([0.3 * np.sin(0.05 * f), 0.0, 0.0])
            out.poses.append(Pose(cam, (1.0, 0.0, 0.0, 0.0),
                                  float(frame_idx)))
            frame_idx += 1
    return out


# ---------------------------------------------------------------------------
# streaming sessions

@dataclass
class FrameRecord:
    frame_idx: int
    input_points: int
    roi_points: int
    payload_bytes: int
    encode_s: float
    transmit_s: float
    decode_s: float
    cd: float
    hd: float
    model_id: str
    bandwidth_mbps: float
    fps: float
    latency_s: float


CSV_COLUMNS = ["frame_idx", "input_points", "roi_points", "payload_bytes",
               "encode_s", "transmit_s", "decode_s", "cd", "hd", "model_id",
               "bandwidth_mbps", "fps", "latency_s"]


@dataclass
class StreamSession:
    records: list
    config: dict
    seed: int

    def to_csv(self, path) -> None:
        """Session log; the first line is a '#' comment with the config."""
        with open(path, "w", newline="") as fh:
            fh.write("# config: " + json.dumps(self.config, sort_keys=True)
                     + "\n")
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for rec in self.records:
                row = []
                for col in CSV_COLUMNS:
                    value = getattr(rec, col)
                    row.append(repr(value) if isinstance(value, float)
                               else value)
                writer.writerow(row)

    def summary(self) -> dict:
        arr = lambda name: np.array([getattr(r, name) for r in self.records])
        return {
            "frames": len(self.records),
            "avg_transmit_s": float(arr("transmit_s").mean()),
            "max_transmit_s": float(arr("transmit_s").max()),
            "avg_decode_s": float(arr("decode_s").mean()),
            "max_decode_s": float(arr("decode_s").max()),
            "avg_encode_s": float(arr("encode_s").mean()),
            "avg_fps": float(arr("fps").mean()),
            "min_fps": float(arr("fps").min()),
            "avg_payload_bytes": float(arr("payload_bytes").mean()),
            "avg_cd": float(arr("cd").mean()),
            "avg_hd": float(arr("hd").mean()),
            "config": self.config,
        }


def _parse_policy(policy: str):
    if policy == "drl":
        return "drl", None
    if policy.startswith("fixed:"):
        return "fixed", policy.split(":", 1)[1]
    if policy.startswith("octree:"):
        return "octree", int(policy.split(":", 1)[1])
    raise ValueError(f"unknown policy '{policy}'; expected 'drl', "
                     "'fixed:<model>', or 'octree:<depth>'")


def run_session(scene: Scene, policy: str, trace: NetworkTrace,
                device: DeviceModel, registry: ModelRegistry | None = None,
                policy_net: ActorCritic | None = None, roi: str = "on",
                roi_cfg: RoiConfig | None = None, frames: int | None = None,
                seed: int = 0, reward_spec: RewardSpec | None = None,
                score_against_full_frame: bool = False) -> StreamSession:
    """Stream a scene through encode -> transmit -> decode, one frame at a
    time.

    ISCom-style policies score CD/HD against the ROI selection (what was
    meant to be sent) unless score_against_full_frame is set; the octree
    baseline always scores against the full frame. Frame rate uses the
    three-stage pipeline approximation 1/max(encode, transmit, decode);
    see `pipeline_fps`.
    """
    kind, arg = _parse_policy(policy)
    if kind in ("drl", "fixed") and registry is None:
        raise ValueError("codec policies need a model registry")
    if kind == "drl" and policy_net is None:
        raise ValueError("the drl policy needs a trained policy net")
    if roi not in ("on", "off"):
        raise ValueError("roi must be 'on' or 'off'")
    roi_cfg = roi_cfg or RoiConfig()
    total = len(scene.frames) if frames is None else min(frames + 1,
                                                         len(scene.frames))
    model_ids = sorted(registry.entries) if registry else []
    spec = reward_spec or RewardSpec(
        accuracy_table=registry.accuracy_table() if registry else {"x": 1.0})

    records = []
    clock_encode_end = 0.0
    clock_send_end = 0.0
    if kind == "fixed":
        current_model = arg
        if registry is not None and current_model not in registry.entries:
            raise KeyError(f"model '{current_model}' not in registry")
    elif kind == "drl":  # start from the most accurate model
        current_model = max(registry.entries,
                            key=lambda k: registry.entries[k].accuracy)
    else:
        current_model = None

    for t in range(1, total):  # frame 0 seeds the flow estimator
        frame = scene.frames[t]
        prev = scene.frames[t - 1]
        frame_seed = seed * 100003 + t

        if roi == "on":
            history = PoseHistory(scene.poses[max(0, t - roi_cfg.k):t + 1]) \
                if t >= 1 else None
            result = select_roi(frame, prev, history, roi_cfg,
                                scene.intrinsics, frame_seed)
            roi_cloud = result.cloud
        else:
            roi_cloud = frame
        ground_truth = frame if (kind == "octree" or
                                 score_against_full_frame) else roi_cloud

        if kind == "octree":
            stream = octree_encode(roi_cloud, arg)
            payload = len(stream)
            decoded = octree_decode(stream).points.astype(np.float64)
            n_points = len(roi_cloud)
            encode_s = n_points * OCTREE_ENCODE_S_PER_POINT
            decode_s = device.decode_time(
                len(decoded) * OCTREE_DECODE_S_PER_POINT)
            model_id = f"octree:{arg}"
        else:
            entry = registry.entries[current_model]
            model = registry.model(current_model)
            decoded_parts = []
            blocks, _ = chunk_blocks(roi_cloud.points, model.n_points)
            for block in blocks:
                norm, centroid, scale = normalize_block(block)
                rebuilt = decode(model, encode(model, norm))
                decoded_parts.append(
                    denormalize_block(rebuilt, centroid, scale))
            decoded = np.concatenate(decoded_parts) if decoded_parts \
                else np.empty((0, 3))
            payload = len(blocks) * entry.payload_per_block()
            encode_s = len(blocks) * entry.encode_cost_s
            decode_s = device.decode_time(len(blocks) * entry.decode_cost_s)
            model_id = current_model

        clock_encode_end += encode_s
        send_start = max(clock_send_end, clock_encode_end)
        transmit_s = transmit_time(payload, trace, send_start)
        clock_send_end = send_start + transmit_s
        bandwidth = payload * 8.0 / transmit_s / 1e6 if transmit_s > 0 \
            else trace.bandwidth_at(send_start)

        if len(decoded) and len(ground_truth):
            cd = chamfer_distance(decoded, ground_truth.points)
            hd = hausdorff_distance(decoded, ground_truth.points)
        else:
            cd = hd = float("nan")

        fps = pipeline_fps(encode_s, transmit_s, decode_s)
        records.append(FrameRecord(
            frame_idx=t, input_points=len(frame), roi_points=len(roi_cloud),
            payload_bytes=int(payload), encode_s=encode_s,
            transmit_s=transmit_s, decode_s=decode_s, cd=cd, hd=hd,
            model_id=model_id, bandwidth_mbps=bandwidth, fps=fps,
            latency_s=encode_s + transmit_s + decode_s))

        if kind == "drl":
            state = build_state(records, k=roi_cfg.k)
            action = select_action(policy_net, state, "greedy")
            current_model = policy_net.actions[action] \
                if action < len(policy_net.actions) else model_ids[-1]
            if current_model not in registry.entries:
                current_model = model_ids[-1]

    config = {"policy": policy, "roi": roi, "trace": trace.tag,
              "device": device.name, "seed": seed,
              "frames": total - 1,
              "roi_cfg": {k: v for k, v in vars(roi_cfg).items()}}
    return StreamSession(records, config, seed)


def pipeline_fps(encode_s: float, transmit_s: float, decode_s: float) -> float:
    """Three-stage pipeline throughput: the slowest stage sets the rate.

    Isolated here so a different frame-rate model can be swapped in.
    """
    bottleneck = max(encode_s, transmit_s, decode_s)
    return 1.0 / bottleneck if bottleneck > 0 else float("inf")


def compare_policies(sessions: dict) -> dict:
    """Side-by-side summary of sessions keyed by policy label."""
    counts = {len(s.records) for s in sessions.values()}
    if len(counts) > 1:
        raise ValueError("sessions cover different frame counts")
    return {name: session.summary() for name, session in sessions.items()}


def comparison_to_csv(report: dict, path) -> None:
    fields = ["policy", "avg_transmit_s", "max_transmit_s", "avg_decode_s",
              "max_decode_s", "avg_fps", "min_fps", "avg_payload_bytes",
              "avg_cd", "avg_hd"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for name, summary in report.items():
            writer.writerow([name] + [repr(summary[f]) for f in fields[1:]])


def comparison_to_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# scheduler training environment

class StreamingSchedulerEnv:
    """Lightweight frame-timing environment for scheduler training.

    Reuses the session timing model (payload -> transmit time, registry
    decode costs, pipeline fps) without geometry, so episodes are cheap.
    Each episode draws a fresh seeded trace around the configured mean and
    a fresh ROI-size profile.
    """

    def __init__(self, registry: ModelRegistry, device: DeviceModel,
                 mean_bandwidth_mbps: float = 25.0,
                 jitter: float = TRACE_JITTER, eta: float = 0.5,
                 f_target: float = 30.0, episode_len: int = 64,
                 blocks_mean: float = 120.0, k: int = 8,
                 b_ref: float = 100.0, t_ref: float = 1.0 / 30.0):
        self.entries = [registry.entries[k] for k in sorted(registry.entries)]
        self.actions = tuple(sorted(registry.entries))
        self.accuracy = [e.accuracy for e in self.entries]
        self.device = device
        self.mean_bw = mean_bandwidth_mbps
        self.jitter = jitter
        self.spec = RewardSpec(eta=eta, f_target=f_target, accuracy_table={
            e.model_id: e.accuracy for e in self.entries})
        self.episode_len = episode_len
        self.blocks_mean = blocks_mean
        self.k = k
        self.b_ref = b_ref
        self.t_ref = t_ref
        self._records = []
        self._trace = None
        self._t = 0.0
        self._left = 0
        self._rng = None

    def _blocks(self):
        return max(1, int(self._rng.normal(self.blocks_mean,
                                           0.15 * self.blocks_mean)))

    def _state(self):
        return build_state(self._records, self.k, self.b_ref, self.t_ref)

    def reset(self, rng) -> SchedulerState:
        self._rng = rng
        self._trace = NetworkTrace.fluctuating(
            self.mean_bw, duration_s=(self.episode_len + 2) / 8.0,
            seed=int(rng.integers(2 ** 31)), jitter=self.jitter)
        self._records = []
        self._t = 0.0
        self._left = self.episode_len
        return self._state()

    def step(self, action: int):
        entry = self.entries[action]
        blocks = self._blocks()
        payload = blocks * entry.payload_per_block()
        encode_s = blocks * entry.encode_cost_s
        transmit_s = transmit_time(payload, self._trace, self._t)
        decode_s = self.device.decode_time(blocks * entry.decode_cost_s)
        fps = pipeline_fps(encode_s, transmit_s, decode_s)
        bandwidth = payload * 8.0 / transmit_s / 1e6 if transmit_s > 0 \
            else self._trace.bandwidth_at(self._t)
        self._records.append({
            "input_points": blocks * 128, "roi_points": blocks * 128,
            "decode_s": decode_s, "bandwidth_mbps": bandwidth})
        self._t += max(transmit_s, 1.0 / self.spec.f_target)
        rew = (self.spec.eta * min(1.0, fps / self.spec.f_target)
               + (1.0 - self.spec.eta) * self.accuracy[action])
        self._left -= 1
        return self._state(), rew, self._left <= 0
