"""Training loop and the toy ablation harness.

One iteration: synthesize a batch of corresponding crop pairs, forward
both crops, build the combined loss, backpropagate, Adam step.  All
randomness for iteration i, pair p derives from seed [seed, i, p], so
a resumed run replays the identical pair stream and matches the
uninterrupted run bit for bit.

Ablation variants:
  full               - repeatability losses + reliability-gated AP
  reliability_only   - AP gate alone, detection on the reliability map
  repeatability_only - gate pinned to 1: plain AP loss on every query
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import backward
from .config import dataclass_from_dict
from .extract import ExtractConfig, extract_keypoints
from .fileio import atomic_write, read_tensor_block, write_tensor_block
from .losses import LossConfig, total_loss
from .metrics import evaluate_pair
from .network import Network, NetworkConfig, build_network, read_model, write_model
from .optim import AdamState, adam_init, adam_step, zero_grads
from .synth import (HomographyRanges, SceneSpec, UnusablePair,
                    list_image_directory, load_photo_scene, make_scene,
                    make_training_pair, pick_scene_kind)

OPT_MAGIC = b"OPT1"
META_MAGIC = b"META"

ABLATIONS = ("full", "reliability_only", "repeatability_only")

# (include_repeatability, gate_reliability, detect_on)
ABLATION_MODES = {
    "full": (True, True, "repeatability"),
    "reliability_only": (False, True, "reliability"),
    "repeatability_only": (True, False, "repeatability"),
}

CSV_HEADER = "iteration,l_cosim,l_peaky_1,l_peaky_2,l_ap_mean,total"


class TrainingDiverged(Exception):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    homography: HomographyRanges = field(default_factory=HomographyRanges)
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    batch_size: int = 8
    iterations: int = 2000
    seed: int = 0
    crop_size: int = 192
    scene_size: int = 288
    scene_mix: dict = field(default_factory=lambda: {
        "checkerboard_triangle": 0.4, "random_polygons": 0.3,
        "texture_noise": 0.2, "gradient_sky": 0.1})
    jitter_brightness: float = 0.1
    jitter_contrast: float = 0.1
    jitter_gain: float = 0.1
    checkpoint_every: int = 500
    ablation: str = "full"
    image_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.crop_size > self.scene_size:
            raise ValueError("crop_size cannot exceed scene_size")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "learning_rate", "weight_decay", "batch_size", "iterations",
            "seed", "crop_size", "scene_size", "scene_mix",
            "jitter_brightness", "jitter_contrast", "jitter_gain",
            "checkpoint_every", "ablation", "image_dir")}
        d["network"] = self.network.to_dict()
        d["loss"] = {k: getattr(self.loss, k) for k in (
            "patch_size", "peaky_weight", "kappa", "q_bins", "grid_step",
            "positive_radius", "negative_radius")}
        d["homography"] = {k: getattr(self.homography, k) for k in (
            "rotation_deg", "scale_min", "scale_max", "translation_frac",
            "perspective")}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        net = NetworkConfig.from_dict(data.pop("network", {}))
        loss = dataclass_from_dict(LossConfig, data.pop("loss", {}), where="loss")
        hom = dataclass_from_dict(HomographyRanges, data.pop("homography", {}),
                                  where="homography")
        cfg = dataclass_from_dict(cls, data, where="train config",
                                  skip_fields=("network", "loss", "homography"))
        return replace(cfg, network=net, loss=loss, homography=hom)


def config_digest(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------
# checkpoint format: model file bytes, then optimizer state, then meta
# ---------------------------------------------------------------------

def write_checkpoint(f, net: Network, state: AdamState, iteration: int,
                     loss_sum: float, loss_count: int, digest: str) -> None:
    write_model(f, net)
    f.write(OPT_MAGIC)
    f.write(struct.pack("<I", state.step))
    f.write(struct.pack("<5d", state.lr, state.beta1, state.beta2,
                        state.eps, state.weight_decay))
    f.write(struct.pack("<I", len(state.m)))
    for m, v in zip(state.m, state.v):
        write_tensor_block(f, m)
        write_tensor_block(f, v)
    f.write(META_MAGIC)
    f.write(struct.pack("<I", iteration))
    f.write(struct.pack("<dI", loss_sum, loss_count))
    enc = digest.encode()
    f.write(struct.pack("<I", len(enc)))
    f.write(enc)


def save_checkpoint(path, net, state, iteration, loss_sum, loss_count, digest):
    with atomic_write(path) as f:
        write_checkpoint(f, net, state, iteration, loss_sum, loss_count, digest)


def load_checkpoint(path):
    """-> (network, AdamState, meta dict)."""
    with open(path, "rb") as f:
        net = read_model(f)
        if f.read(4) != OPT_MAGIC:
            raise ValueError("checkpoint lacks optimizer state")
        (step,) = struct.unpack("<I", f.read(4))
        lr, b1, b2, eps, wd = struct.unpack("<5d", f.read(40))
        (n,) = struct.unpack("<I", f.read(4))
        params = net.parameters()
        if n != len(params):
            raise ValueError(f"optimizer state holds {n} slots, model has {len(params)}")
        m, v = [], []
        for _ in range(n):
            m.append(read_tensor_block(f))
            v.append(read_tensor_block(f))
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd,
                          step=step, m=m, v=v)
        if f.read(4) != META_MAGIC:
            raise ValueError("checkpoint lacks metadata")
        (iteration,) = struct.unpack("<I", f.read(4))
        loss_sum, loss_count = struct.unpack("<dI", f.read(12))
        (dn,) = struct.unpack("<I", f.read(4))
        digest = f.read(dn).decode()
    meta = {"iteration": iteration, "loss_sum": loss_sum,
            "loss_count": loss_count, "config_digest": digest}
    return net, state, meta


# ---------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------

@dataclass
class TrainResult:
    network: Network
    state: AdamState
    curve: list                 # (iteration, l_cosim, l_peaky_1, l_peaky_2, l_ap_mean, total)
    iterations_done: int
    checkpoint_path: str | None = None


def _synthesize_pair(cfg: TrainConfig, rng, photo_paths):
    jit = SceneSpec(kind="checkerboard_triangle", size=cfg.scene_size, seed=0,
                    brightness=cfg.jitter_brightness,
                    contrast=cfg.jitter_contrast, gain=cfg.jitter_gain)
    for _ in range(20):
        try:
            if photo_paths is not None:
                image = load_photo_scene(photo_paths, cfg.scene_size, rng)
            else:
                kind = pick_scene_kind(cfg.scene_mix, rng)
                spec = SceneSpec(kind=kind, size=cfg.scene_size,
                                 seed=int(rng.integers(0, 2 ** 31)))
                image = make_scene(spec).image
            return make_training_pair(image, cfg.homography, cfg.crop_size,
                                      rng, jitter=jit)
        except UnusablePair:
            continue
    raise UnusablePair("could not synthesize a usable pair in 20 scenes")


def train(config: TrainConfig, out_dir=None, resume_from=None,
          log_fn=None) -> TrainResult:
    include_rep, gate, _ = ABLATION_MODES[config.ablation]
    digest = config_digest(config)
    photo_paths = (list_image_directory(config.image_dir)
                   if config.image_dir else None)

    if resume_from is not None:
        net, state, meta = load_checkpoint(resume_from)
        if meta["config_digest"] != digest:
            raise ValueError("checkpoint was produced by a different config")
        start = meta["iteration"]
        loss_sum, loss_count = meta["loss_sum"], meta["loss_count"]
    else:
        net = build_network(config.network)
        state = adam_init(net.parameters(), lr=config.learning_rate,
                          weight_decay=config.weight_decay)
        start = 0
        loss_sum, loss_count = 0.0, 0

    params = net.parameters()
    curve = []
    csv_path = ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "loss_curve.csv")
        if resume_from is None or not os.path.exists(csv_path):
            with open(csv_path, "w") as f:
                f.write(CSV_HEADER + "\n")

    for it in range(start, config.iterations):
        parts = np.zeros(5)
        for p in range(config.batch_size):
            rng = np.random.default_rng([config.seed, it, p])
            pair = _synthesize_pair(config, rng, photo_paths)
            o1 = net.forward(pair.image1)
            o2 = net.forward(pair.image2)
            res = total_loss(o1, o2, pair.field.U, pair.field.valid, config.loss,
                             include_repeatability=include_rep,
                             gate_reliability=gate)
            backward(res.total * (1.0 / config.batch_size))
            parts += (res.l_cosim, res.l_peaky_1, res.l_peaky_2,
                      res.l_ap_mean, res.total.item())
        parts /= config.batch_size
        if not np.isfinite(parts[4]):
            raise TrainingDiverged(it, parts[4])
        # single-loss ablations leave one head out of the graph, so its
        # parameters legitimately carry no gradient and stay frozen
        adam_step(params, state, allow_missing=config.ablation != "full")
        zero_grads(params)

        loss_sum += parts[4]
        loss_count += 1
        row = (it, *parts)
        curve.append(row)
        if csv_path is not None:
            with open(csv_path, "a") as f:
                f.write(",".join(repr(float(x)) if i else str(it)
                                 for i, x in enumerate(row)) + "\n")
        if log_fn is not None and (it % 50 == 0 or it + 1 == config.iterations):
            log_fn(f"iter {it + 1}/{config.iterations} total {parts[4]:.4f} "
                   f"(cosim {parts[0]:.4f} ap {parts[3]:.4f})")
        if out_dir is not None and config.checkpoint_every > 0 \
                and (it + 1) % config.checkpoint_every == 0:
            ckpt_path = os.path.join(out_dir, f"checkpoint_{it + 1:06d}.ckpt")
            save_checkpoint(ckpt_path, net, state, it + 1, loss_sum, loss_count, digest)

    if out_dir is not None:
        ckpt_path = os.path.join(out_dir, "checkpoint_final.ckpt")
        save_checkpoint(ckpt_path, net, state, config.iterations, loss_sum,
                        loss_count, digest)
    return TrainResult(network=net, state=state, curve=curve,
                       iterations_done=config.iterations - start,
                       checkpoint_path=ckpt_path)


# ---------------------------------------------------------------------
# held-out evaluation and the three-row ablation table
# ---------------------------------------------------------------------

EVAL_STREAM_TAG = 2 ** 31 - 1   # disjoint from training streams [seed, it, p]


def generate_eval_pairs(config: TrainConfig, count: int):
    """Held-out synthetic pairs from a stream training never touches."""
    photo_paths = (list_image_directory(config.image_dir)
                   if config.image_dir else None)
    pairs = []
    for i in range(count):
        rng = np.random.default_rng([config.seed, EVAL_STREAM_TAG, i])
        pairs.append(_synthesize_pair(config, rng, photo_paths))
    return pairs


def evaluate_on_pairs(net: Network, pairs, K: int = 200, tol_px: float = 3.0,
                      thresholds=(1.0, 3.0), detect_on: str = "repeatability"):
    """Mean repeatability / MMA / M-score of a model over crop pairs."""
    ecfg = ExtractConfig(threshold_s=0.0, threshold_r=0.0, detect_on=detect_on)
    results = []
    for pair in pairs:
        ka = extract_keypoints(pair.image1, net, K, ecfg)
        kb = extract_keypoints(pair.image2, net, K, ecfg)
        results.append(evaluate_pair(ka, kb, pair.crop_homography, thresholds, tol_px))
    reps = [r.repeatability for r in results]
    mmas = {float(t): float(np.mean([r.mma_at[float(t)] for r in results]))
            for t in thresholds}
    scored = [r.m_score.value for r in results if r.m_score.status == "ok"]
    return {
        "repeatability": float(np.mean(reps)),
        "mma": mmas,
        "m_score": float(np.mean(scored)) if scored else None,
        "pairs": len(pairs),
        "pairs_skipped": len(pairs) - len(scored),
    }


def run_toy_ablation(base_config: TrainConfig, eval_pairs: int = 20,
                     eval_k: int = 200, tol_px: float = 3.0,
                     log_fn=None) -> dict:
    """Train the three variants on shared seeds and score them on one
    held-out pair set; rows mirror the ablation table layout
    (reliability-only, repeatability-only, then the full model)."""
    pairs = generate_eval_pairs(base_config, eval_pairs)
    rows = []
    for variant in ("reliability_only", "repeatability_only", "full"):
        cfg = replace(base_config, ablation=variant)
        if log_fn is not None:
            log_fn(f"training variant {variant} "
                   f"({cfg.iterations} iterations, batch {cfg.batch_size})")
        result = train(cfg, log_fn=log_fn)
        _, _, detect_on = ABLATION_MODES[variant]
        scores = evaluate_on_pairs(result.network, pairs, K=eval_k,
                                   tol_px=tol_px, thresholds=(tol_px,),
                                   detect_on=detect_on)
        rows.append({
            "variant": variant,
            "uses_repeatability_loss": ABLATION_MODES[variant][0],
            "uses_reliability_gate": ABLATION_MODES[variant][1],
            "detection_map": detect_on,
            f"mma@{tol_px:g}": scores["mma"][float(tol_px)],
            "m_score": scores["m_score"],
            "repeatability": scores["repeatability"],
        })
        if log_fn is not None:
            log_fn(f"  {variant}: mma@{tol_px:g} {rows[-1][f'mma@{tol_px:g}']:.3f} "
                   f"m_score {rows[-1]['m_score']}")
    return {
        "layout": "ablation-table",
        "eval_pairs": eval_pairs,
        "eval_top_k": eval_k,
        "tolerance_px": tol_px,
        "rows": rows,
    }
