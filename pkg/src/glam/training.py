"""Losses, balanced sampling, the four training stages, and hyperparameter search.

Stage 1 trains the global net alone. Stage 2 freezes it and picks the
patches the local net trains on. Stage 3 trains the local net with
concatenation aggregation. Stage 4 trains everything jointly with attention
aggregation and the fusion head. Every stage keeps the epoch (0 = the
starting weights) with the best validation Dice.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from glam.config import GlamConfig
from glam.fusion import combine_saliency
from glam.global_net import ConfigError
from glam.local_net import aggregate_attention, aggregate_concat
from glam.maps import CLASSES
from glam.metrics import auc, mean_dice
from glam.model import GLAM
from glam.patches import PatchLocation, extract_patches, random_locations, select_patches
from glam.synthdata import Example

log = logging.getLogger(__name__)

EPS = 1e-7


class StageError(RuntimeError):
    """A training stage was started without the artifacts it depends on."""


# ------------------------------------------------------------------------ losses

def bce(y: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy summed over the trailing class dim."""
    p = p.clamp(EPS, 1 - EPS)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).sum(-1)


def loss_global(y, y_tilde, saliencies, lam: float) -> torch.Tensor:
    """BCE of every scale's prediction plus ``lam`` times the L1 mass of its map.

    Unbatched: ``y`` [C], ``y_tilde`` [3, C], maps [C, h, w]. With a leading
    batch dim the per-image losses are averaged.
    """
    y = torch.as_tensor(y)
    if y_tilde.dim() == 2:
        return loss_global(y[None], y_tilde[None], [s[None] for s in saliencies], lam)
    total = bce(y[:, None, :], y_tilde).sum(-1)
    for s in saliencies:
        total = total + lam * s.abs().flatten(1).sum(-1)
    return total.mean()


def loss_local(y, y_hat_l, patch_maps, lam: float) -> torch.Tensor:
    """BCE of the bag prediction plus ``lam`` times the L1 mass of all patch maps.

    ``patch_maps`` is ``[K, C, h, w]`` for one bag (or ``[N, K, C, h, w]``
    with ``y_hat_l`` of shape ``[N, C]``, averaged over the batch).
    """
    y = torch.as_tensor(y)
    if y_hat_l.dim() == 1:
        return loss_local(y[None], y_hat_l[None], patch_maps[None], lam)
    sparsity = patch_maps.abs().flatten(1).sum(-1)
    return (bce(y, y_hat_l) + lam * sparsity).mean()


def loss_joint(l_g: torch.Tensor, l_l: torch.Tensor, y, y_hat_f) -> torch.Tensor:
    y = torch.as_tensor(y)
    return l_g + l_l + bce(y, y_hat_f).mean()


# ---------------------------------------------------------------------- sampling

def sample_epoch(positive: Sequence[bool], rng: np.random.Generator) -> list[int]:
    """All positives plus as many negatives, shuffled.

    Negatives are drawn without replacement, or with replacement when there
    are fewer negatives than positives.
    """
    positive = np.asarray(positive, dtype=bool)
    pos = np.flatnonzero(positive)
    neg = np.flatnonzero(~positive)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balanced sampling needs at least one positive and one negative example")
    replace = len(neg) < len(pos)
    picked = rng.choice(neg, size=len(pos), replace=replace)
    order = np.concatenate([pos, picked])
    rng.shuffle(order)
    return [int(i) for i in order]


@dataclass
class PatchBag:
    """The crops one training image contributes to local training."""

    index: int
    id: str
    labels: tuple[int, int]
    locations: list[PatchLocation]

    def to_json(self) -> dict:
        return {"index": self.index, "id": self.id, "labels": list(self.labels),
                "locations": [loc.to_dict() for loc in self.locations]}

    @classmethod
    def from_json(cls, data: dict) -> "PatchBag":
        return cls(int(data["index"]), data["id"], tuple(data["labels"]),
                   [PatchLocation(**loc) for loc in data["locations"]])


def choose_locations(sg, positive: bool, K: int, mode: str, rng: np.random.Generator,
                     patch_px, image_dims) -> list[PatchLocation]:
    if positive or mode == "global_proposals":
        return select_patches(sg, K, patch_px, image_dims)
    if mode != "random_negatives":
        raise ConfigError(f"unknown negative sampling mode {mode!r}")
    return random_locations(rng, K, patch_px, image_dims)


@torch.no_grad()
def build_local_training_set(model: GLAM, examples: Sequence[Example], K: int,
                             mode: str, rng: np.random.Generator) -> list[PatchBag]:
    """Stage 2: ``K`` crops per training image from the frozen global net."""
    if "stage1" not in model.completed:
        raise StageError("local training patches need a trained global net (stage 1)")
    cfg = model.config
    model.eval()
    bags = []
    for i, ex in enumerate(examples):
        sg = model.global_net(torch.from_numpy(ex.image)[None]).sg[0]
        locs = choose_locations(sg, ex.positive, K, mode, rng, cfg.local.patch_px, cfg.image_dims)
        bags.append(PatchBag(i, ex.id, ex.labels, locs))
    return bags


def save_patch_set(path, bags: Sequence[PatchBag]) -> None:
    lines = [json.dumps(b.to_json()) for b in bags]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_patch_set(path) -> list[PatchBag]:
    text = Path(path).read_text(encoding="utf-8")
    return [PatchBag.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


# -------------------------------------------------------------------- evaluation

@dataclass
class Prediction:
    y_hat_g: np.ndarray                # [2]
    maps: dict                         # name -> [2, h, w] float64
    y_hat_l: Optional[np.ndarray] = None
    y_hat_f: Optional[np.ndarray] = None


@torch.no_grad()
def predict(model: GLAM, examples: Sequence[Example], maps: Sequence[str] = ("sg",),
            M: Optional[int] = None, gamma_c: Optional[float] = None,
            attention: Optional[bool] = None, batch_size: int = 8) -> list[Prediction]:
    """Model outputs for every example; ``maps`` picks from s0, s1, s2, sg, sl, sc."""
    model.eval()
    cfg = model.config
    M = cfg.train.M if M is None else M
    gamma_c = cfg.gamma_c if gamma_c is None else gamma_c
    need_local = bool({"sl", "sc"} & set(maps))
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        images = torch.from_numpy(np.stack([ex.image for ex in chunk]))
        glob = model.global_net(images)
        for j in range(len(chunk)):
            pred = Prediction(glob.y_hat_g[j].double().numpy(), {})
            for name in ("s0", "s1", "s2", "sg"):
                if name in maps:
                    pred.maps[name] = getattr(glob, name)[j].double().numpy()
            if need_local:
                locs = model.propose(glob, M, j)
                local = model.local_forward(images[j], locs, attention)
                sl = local.saliency(cfg.image_dims)
                pred.y_hat_l = local.y_hat_l.double().numpy()
                if local.z_l is not None:
                    pred.y_hat_f = model.fusion(glob.z_g[j], local.z_l).double().numpy()
                if "sl" in maps:
                    pred.maps["sl"] = sl.numpy()
                if "sc" in maps:
                    pred.maps["sc"] = combine_saliency(glob.saliency("sg", j), sl, gamma_c).numpy()
            out.append(pred)
    return out


def validation_record(preds: Sequence[Prediction], examples: Sequence[Example], map_name: str,
                      stage: str, epoch: int, loss: Optional[float] = None) -> dict:
    masks = [ex.mask_array() for ex in examples]
    score, per_class = mean_dice([p.maps[map_name] for p in preds], masks)
    scores = np.stack([p.y_hat_g for p in preds])
    labels = np.array([ex.labels for ex in examples])
    aucs = [auc(scores[:, c], labels[:, c]) for c in range(len(CLASSES))]
    return {"stage": stage, "epoch": epoch, "split": "val", "loss": loss,
            "dice_malignant": per_class[0], "dice_benign": per_class[1],
            "auc_malignant": aucs[0], "auc_benign": aucs[1], "score": score}


class MetricsLog:
    """Append-only JSON-lines record of per-epoch metrics."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")


def _train_record(stage: str, epoch: int, loss: float) -> dict:
    return {"stage": stage, "epoch": epoch, "split": "train", "loss": loss,
            "dice_malignant": None, "dice_benign": None,
            "auc_malignant": None, "auc_benign": None}


# ------------------------------------------------------------------------ stages

@dataclass
class StageResult:
    stage: str
    best_epoch: int
    best_score: float
    train_losses: list[float] = field(default_factory=list)
    val_scores: list[float] = field(default_factory=list)
    seconds: float = 0.0


def _snapshot(modules) -> list[dict]:
    return [{k: v.detach().clone() for k, v in m.state_dict().items()} for m in modules]


def _restore(modules, states) -> None:
    for m, s in zip(modules, states):
        m.load_state_dict(s)


def _optimizer(params, cfg: GlamConfig):
    t = cfg.train
    return torch.optim.Adam(params, lr=t.eta, betas=(t.beta1, t.beta2), eps=t.adam_eps)


def _batches(order: list[int], size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _maybe_flip(images: torch.Tensor, enabled: bool, rng: np.random.Generator) -> torch.Tensor:
    if not enabled:
        return images
    flips = rng.random(len(images)) < 0.5
    return torch.stack([torch.flip(x, dims=[-1]) if f else x for x, f in zip(images, flips)])


def _run_epochs(name: str, epochs: int, modules, step_epoch, validate, log_: MetricsLog) -> StageResult:
    """Shared loop: validate epoch 0, then train/validate, keeping the best epoch."""
    start = time.perf_counter()
    record = validate(0)
    log_.write(record)
    result = StageResult(name, 0, record["score"], val_scores=[record["score"]])
    best = _snapshot(modules)
    for epoch in range(1, epochs + 1):
        loss = step_epoch(epoch)
        result.train_losses.append(loss)
        log_.write(_train_record(name, epoch, loss))
        record = validate(epoch)
        log_.write(record)
        result.val_scores.append(record["score"])
        log.info("%s epoch %d: loss %.4f, val dice %.4f", name, epoch, loss, record["score"])
        # strict improvement only, so ties keep the earlier epoch
        if record["score"] > result.best_score:
            result.best_epoch, result.best_score = epoch, record["score"]
            best = _snapshot(modules)
    _restore(modules, best)
    result.seconds = time.perf_counter() - start
    return result


def _stage_rng(cfg: GlamConfig, stage: int) -> np.random.Generator:
    return np.random.default_rng([cfg.train.seed, stage])


def _labels(examples: Sequence[Example]) -> torch.Tensor:
    return torch.tensor([ex.labels for ex in examples], dtype=torch.float32)


def train_global(model: GLAM, splits: dict, log_: Optional[MetricsLog] = None) -> StageResult:
    """Stage 1: the global net on whole images with the multi-scale loss."""
    cfg = model.config
    log_ = log_ or MetricsLog()
    train, val = splits["train"], splits["val"]
    rng = _stage_rng(cfg, 1)
    net = model.global_net
    opt = _optimizer(net.parameters(), cfg)
    labels = _labels(train)

    def step_epoch(epoch):
        net.train()
        order = sample_epoch([ex.positive for ex in train], rng)
        losses = []
        for batch in _batches(order, cfg.train.batch_size):
            images = torch.from_numpy(np.stack([train[i].image for i in batch]))
            images = _maybe_flip(images, cfg.train.flip, rng)
            out = net(images)
            loss = loss_global(labels[batch], out.y_tilde, (out.s0, out.s1, out.s2), cfg.train.lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(batch))
        return float(sum(losses) / len(order))

    def validate(epoch):
        preds = predict(model, val, ("sg",))
        return validation_record(preds, val, "sg", "global", epoch)

    result = _run_epochs("global", cfg.train.epochs_global, [net], step_epoch, validate, log_)
    model.completed.add("stage1")
    return result


def train_local(model: GLAM, splits: dict, bags: Sequence[PatchBag],
                log_: Optional[MetricsLog] = None) -> StageResult:
    """Stage 3: the local net on the stage-2 crops with concatenation aggregation.

    The global net is frozen; validation uses its proposals to place the
    ``M`` inference patches.
    """
    if "stage1" not in model.completed:
        raise StageError("local training needs a trained global net (stage 1)")
    if not bags:
        raise StageError("local training needs the stage-2 patch set")
    cfg = model.config
    log_ = log_ or MetricsLog()
    train, val = splits["train"], splits["val"]
    rng = _stage_rng(cfg, 3)
    net = model.local_net
    for p in model.global_net.parameters():
        p.requires_grad_(False)
    opt = _optimizer(net.parameters(), cfg)
    t_local = cfg.local.t_local

    def step_epoch(epoch):
        net.train()
        order = sample_epoch([any(b.labels) for b in bags], rng)
        losses = []
        for batch in _batches(order, cfg.train.batch_size):
            crops, ys = [], []
            for i in batch:
                bag = bags[i]
                image = torch.from_numpy(train[bag.index].image)
                crops.extend(extract_patches(image, bag.locations))
                ys.append(bag.labels)
            crops = _maybe_flip(torch.stack(crops), cfg.train.flip, rng)
            out = net(crops)
            k = len(bags[batch[0]].locations)
            maps = out.a.reshape(len(batch), k, *out.a.shape[1:])
            y_hat = torch.stack([aggregate_concat(m, t_local) for m in maps])
            loss = loss_local(torch.tensor(ys, dtype=torch.float32), y_hat, maps, cfg.train.lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(batch))
        return float(sum(losses) / len(order))

    def validate(epoch):
        preds = predict(model, val, ("sl",), attention=False)
        return validation_record(preds, val, "sl", "local", epoch)

    try:
        result = _run_epochs("local", cfg.train.epochs_local, [net], step_epoch, validate, log_)
    finally:
        for p in model.global_net.parameters():
            p.requires_grad_(True)
    model.completed.add("stage3")
    return result


def train_joint(model: GLAM, splits: dict, log_: Optional[MetricsLog] = None) -> StageResult:
    """Stage 4: every module trained jointly through the fusion head, with attention aggregation."""
    missing = {"stage1", "stage3"} - model.completed
    if missing:
        raise StageError(f"joint training needs {', '.join(sorted(missing))} first")
    cfg = model.config
    log_ = log_ or MetricsLog()
    train, val = splits["train"], splits["val"]
    rng = _stage_rng(cfg, 4)
    modules = [model.global_net, model.local_net, model.attention, model.fusion]
    opt = _optimizer([p for m in modules for p in m.parameters()], cfg)
    labels = _labels(train)
    K, lam = cfg.train.K, cfg.train.lam

    def step_epoch(epoch):
        model.train()
        order = sample_epoch([ex.positive for ex in train], rng)
        losses = []
        for batch in _batches(order, cfg.train.batch_size):
            images = torch.from_numpy(np.stack([train[i].image for i in batch]))
            images = _maybe_flip(images, cfg.train.flip, rng)
            y = labels[batch]
            glob = model.global_net(images)
            l_g = loss_global(y, glob.y_tilde, (glob.s0, glob.s1, glob.s2), lam)
            crops = []
            for j, i in enumerate(batch):
                locs = choose_locations(glob.sg[j].detach(), train[i].positive, K,
                                        cfg.train.negative_sampling, rng,
                                        cfg.local.patch_px, cfg.image_dims)
                crops.extend(extract_patches(images[j], locs))
            out = model.local_net(torch.stack(crops))
            maps = out.a.reshape(len(batch), K, *out.a.shape[1:])
            preds = out.y_hat.reshape(len(batch), K, -1)
            vecs = out.z.reshape(len(batch), K, -1)
            y_l, z_l = [], []
            for j in range(len(batch)):
                yj, zj, _ = aggregate_attention(preds[j], vecs[j], model.attention)
                y_l.append(yj)
                z_l.append(zj)
            y_l, z_l = torch.stack(y_l), torch.stack(z_l)
            l_l = loss_local(y, y_l, maps, lam)
            y_f = model.fusion(glob.z_g, z_l)
            loss = loss_joint(l_g, l_l, y, y_f)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(batch))
        return float(sum(losses) / len(order))

    def validate(epoch):
        preds = predict(model, val, ("sc",), attention=True)
        return validation_record(preds, val, "sc", "joint", epoch)

    result = _run_epochs("joint", cfg.train.epochs_joint, modules, step_epoch, validate, log_)
    model.use_attention = True
    model.completed.add("stage4")
    return result



@dataclass
class PipelineResult:
    model: GLAM
    stages: dict
    bags: list


def run_pipeline(config: GlamConfig, splits: dict, out_dir=None,
                 log_: Optional[MetricsLog] = None) -> PipelineResult:
    """Stages 1 to 4 in order; checkpoints go to ``out_dir`` when given."""
    from glam.io import save_checkpoint

    config.validate()
    torch.manual_seed(config.train.seed)
    model = GLAM(config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if log_ is None:
            log_ = MetricsLog(out_dir / "metrics.jsonl")
    log_ = log_ or MetricsLog()
    digest = config.digest()
    stages = {"stage1": train_global(model, splits, log_)}
    if out_dir is not None:
        save_checkpoint(out_dir / "global.ckpt", model.registry("stage1"), "stage1", digest)
    bags = build_local_training_set(model, splits["train"], config.train.K,
                                    config.train.negative_sampling, _stage_rng(config, 2))
    stages["stage3"] = train_local(model, splits, bags, log_)
    if out_dir is not None:
        save_patch_set(out_dir / "patches.jsonl", bags)
        save_checkpoint(out_dir / "local.ckpt", model.registry("stage3"), "stage3", digest)
    stages["stage4"] = train_joint(model, splits, log_)
    if out_dir is not None:
        save_checkpoint(out_dir / "joint.ckpt", model.registry("stage4"), "stage4", digest)
    return PipelineResult(model, stages, bags)


# ---------------------------------------------------------------- random search

@dataclass
class SearchSpace:
    eta_log10: tuple[float, float] = (-5.5, -4.0)
    lam_log10: tuple[float, float] = (-5.5, -3.5)
    t_choices: tuple[float, ...] = (1, 2, 3, 5, 10, 20)
    n_trials: int = 30


@dataclass
class SearchTrial:
    eta: float
    lam: float
    t: float

    def apply(self, config: GlamConfig) -> GlamConfig:
        """Copy of ``config`` with this trial's learning rate, sparsity and pooling."""
        from dataclasses import replace
        return config.replace(
            train=replace(config.train, eta=self.eta, lam=self.lam),
            global_=replace(config.global_, t_global=self.t),
            local=replace(config.local, t_local=self.t))

    def to_json(self) -> dict:
        return {"eta": self.eta, "lambda": self.lam, "t": self.t}


def random_search(space: SearchSpace, rng: np.random.Generator) -> list[SearchTrial]:
    """``n_trials`` draws: eta and lambda log-uniform, t uniform over its choices."""
    if space.n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    trials = []
    for _ in range(space.n_trials):
        eta = 10.0 ** rng.uniform(*space.eta_log10)
        lam = 10.0 ** rng.uniform(*space.lam_log10)
        t = space.t_choices[int(rng.integers(len(space.t_choices)))]
        trials.append(SearchTrial(float(eta), float(lam), t))
    return trials
