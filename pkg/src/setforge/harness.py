"""Training and evaluation harness.

A run is: config -> datasets -> model bundle -> epochs of Adam -> metrics CSV,
checkpoint, and a JSON summary in the run directory. Everything is
deterministic given (seed, data_seed): seed drives parameter init, data_seed
drives shuffling, scene synthesis, and initial-set sampling.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import diffcore as dc
from . import setloss
from .checkpoint import load_arrays, save_arrays
from .diffcore import Tensor, make_rng
from .encoders import ConvImageEncoder, SetEncoder
from .generators import CDSPN, DSPN, TSPN, CardinalityHead, SetPrediction
from .nn import count_params, load_into, merge_params

AP_THRESHOLDS = {"ap50": 0.5, "ap95": 0.05, "ap98": 0.02, "ap99": 0.01}


@dataclass
class ExperimentConfig:
    task: str = "set-mnist"          # set-mnist | detection
    model: str = "tspn"              # tspn | dspn | cdspn
    seed: int = 0
    data_seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = ""
    # architecture
    embed: int = 48
    hidden: int = 48
    width: int = 48
    heads: int = 4
    layers: int = 3
    shared_layers: bool = True
    knots: int = 20
    ff_mult: int = 2
    card_hidden: int = 128
    channels: str = "16,32,64,64"
    inner_steps: int = 10
    inner_lr: float = 800.0
    presence_threshold: float = 0.5
    # training
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    card_lr: float = 0.0             # size-head learning rate; 0 = use lr
    card_refresh_steps: int = 0      # extra size-head steps on cached embeddings
    loss: str = "chamfer"            # chamfer | hungarian
    repr_weight: float = 0.1
    detach_size_input: bool = True   # stop embedding gradient from the size CE
    train_limit: int = 6000
    test_limit: int = 1000
    train_scenes: int = 10000
    test_scenes: int = 1000
    use_gt_size: bool = False        # eval ablation: oracle sizes
    eval_every: int = 0              # epochs between test evals; 0 = end only
    eval_limit: int = 0              # cap eval examples; 0 = all

    def channels_tuple(self):
        return tuple(int(c) for c in str(self.channels).split(",") if c != "")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        """Build from string-valued keys (config files, CLI overrides)."""
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            name = key.replace("-", "_")
            if name not in fields:
                raise KeyError(f"unknown config key: {key}")
            target = fields[name].type
            if isinstance(raw, str):
                if target == "int":
                    kwargs[name] = int(raw)
                elif target == "float":
                    kwargs[name] = float(raw)
                elif target == "bool":
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(f"bad boolean for {key}: {raw}")
                    kwargs[name] = raw.lower() in ("true", "1", "yes")
                else:
                    kwargs[name] = raw
            else:
                kwargs[name] = raw
        return cls(**kwargs)

    def validate(self):
        if self.task not in ("set-mnist", "detection"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.model not in ("tspn", "dspn", "cdspn"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.loss not in ("chamfer", "hungarian"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.card_lr < 0:
            raise ValueError("card_lr must be non-negative")
        return self


# ---------------------------------------------------------------------------
# model bundle


class Bundle:
    """Conditioning encoder + decoder (+ size head) for one experiment."""

    def __init__(self, config: ExperimentConfig, n_max: int):
        c = config
        self.config = c
        self.n_max = n_max
        self.dim = 2 if c.task == "set-mnist" else 4
        rng = make_rng(c.seed, 0)

        if c.task == "set-mnist":
            # autoencoding: the conditioning comes from the set itself
            cond_dim = self.dim + 1 if c.model == "dspn" else self.dim
            self.cond_encoder = SetEncoder(cond_dim, c.hidden, c.embed, rng,
                                           knots=c.knots)
            inner_encoder = self.cond_encoder
        else:
            self.cond_encoder = ConvImageEncoder(c.embed, rng,
                                                 channels=c.channels_tuple())
            set_dim = self.dim + 1 if c.model == "dspn" else self.dim
            inner_encoder = (SetEncoder(set_dim, c.hidden, c.embed, rng,
                                        knots=c.knots)
                             if c.model in ("dspn", "cdspn") else None)

        if c.model == "tspn":
            self.decoder = TSPN(self.dim, c.embed, c.width, rng, heads=c.heads,
                                layers=c.layers, shared=c.shared_layers,
                                ff_mult=c.ff_mult)
        elif c.model == "dspn":
            self.decoder = DSPN(inner_encoder, n_max, self.dim, rng,
                                steps=c.inner_steps, inner_lr=c.inner_lr,
                                threshold=c.presence_threshold)
        else:
            self.decoder = CDSPN(inner_encoder, n_max, self.dim, rng,
                                 steps=c.inner_steps, inner_lr=c.inner_lr)

        self.card_head = None
        if c.model in ("tspn", "cdspn"):
            self.card_head = CardinalityHead(c.embed, n_max, rng,
                                             hidden=c.card_hidden)

    def params(self) -> dict:
        parts = []
        if self.config.task == "detection":
            parts.append(self.cond_encoder.params("image_encoder"))
        if self.config.model == "tspn":
            if self.config.task == "set-mnist":
                parts.append(self.cond_encoder.params("set_encoder"))
            parts.append(self.decoder.params("tspn"))
        else:
            # the decoder owns the set encoder (shared with conditioning on
            # set-mnist), so its params() already covers it
            parts.append(self.decoder.params(self.config.model))
        if self.card_head is not None:
            parts.append(self.card_head.params("cardinality"))
        return merge_params(*parts)

    # -- conditioning --------------------------------------------------------

    def condition(self, batch: data_mod.Batch) -> Tensor:
        if self.config.task == "detection":
            return self.cond_encoder(batch.images)
        if self.config.model == "dspn":
            feats = np.concatenate([batch.points, batch.mask[:, :, None]],
                                   axis=-1)
            return self.cond_encoder(Tensor(feats))
        return self.cond_encoder(Tensor(batch.points), batch.mask)

    # -- training loss -------------------------------------------------------

    def _set_loss(self, pred_pts: Tensor, batch, mask_a, mask_b) -> Tensor:
        if self.config.loss == "chamfer":
            per = setloss.chamfer(pred_pts, Tensor(batch.points),
                                  mask_a=mask_a, mask_b=mask_b)
            return dc.reduce_mean(per)
        # hungarian: equal-size sets per example, solved one by one
        losses = []
        for i, size in enumerate(batch.sizes):
            a = dc.take(pred_pts, np.array([i]), axis=0)
            a = dc.reshape(a, pred_pts.shape[1:])
            a = dc.take(a, np.arange(size), axis=0)
            b = batch.points[i, :size]
            losses.append(setloss.hungarian_loss(a, b))
        total = losses[0]
        for term in losses[1:]:
            total = total + term
        return total * (1.0 / len(losses))

    def loss(self, batch: data_mod.Batch, noise_rng) -> Tensor:
        c = self.config
        h = self.condition(batch)
        if c.model == "tspn":
            pred = self.decoder.decode(h, batch.sizes, rng=noise_rng)
            main = self._set_loss(pred.points, batch, batch.mask, batch.mask)
            total = main
        elif c.model == "dspn":
            pred, h_final = self.decoder.decode(h)
            pres = dc.reshape(pred.presence, pred.presence.shape + (1,))
            pts = dc.concat([pred.points, pres], axis=-1)
            target = np.concatenate([batch.points, batch.mask[:, :, None]],
                                    axis=-1)
            # padding rows count as real zero elements here; that is the
            # behaviour under study, not an oversight
            per = setloss.chamfer(pts, Tensor(target))
            total = dc.reduce_mean(per) \
                + c.repr_weight * dc.reduce_mean(setloss.repr_loss(h, h_final))
        else:
            pred, h_final = self.decoder.decode(h, batch.sizes)
            mask = pred.presence.values
            main = self._set_loss(pred.points, batch, mask, batch.mask)
            total = main \
                + c.repr_weight * dc.reduce_mean(setloss.repr_loss(h, h_final))
        if self.card_head is not None:
            h_in = dc.detach(h) if c.detach_size_input else h
            total = total + self.card_head.loss(h_in, batch.sizes)
        return total

    # -- prediction ----------------------------------------------------------

    def predict(self, batch: data_mod.Batch, noise_rng) -> SetPrediction:
        c = self.config
        h = self.condition(batch)
        if c.model == "dspn":
            pred, _ = self.decoder.decode(h)
            return pred
        if c.use_gt_size:
            sizes = batch.sizes
        else:
            sizes = self.card_head.predict(h)
            sizes = np.clip(sizes, 1, self.n_max)
        if c.model == "tspn":
            return self.decoder.decode(h, sizes, rng=noise_rng)
        pred, _ = self.decoder.decode(h, sizes)
        return pred


def build_bundle(config: ExperimentConfig, n_max: int) -> Bundle:
    return Bundle(config, n_max)


# ---------------------------------------------------------------------------
# metrics


def greedy_match_fraction(pred: np.ndarray, truth: np.ndarray,
                          threshold: float) -> float:
    """Fraction of a perfect matching achieved by greedy nearest pairing.

    Pairs are taken globally by ascending Euclidean distance; a pair counts
    when its distance is at most ``threshold``. Normalised by the larger of
    the two set sizes, so hallucinated and missed elements both cost.
    """
    p, g = len(pred), len(truth)
    if p == 0 and g == 0:
        return 1.0
    if p == 0 or g == 0:
        return 0.0
    d = np.sqrt(((pred[:, None, :] - truth[None, :, :]) ** 2).sum(-1))
    order = np.argsort(d, axis=None, kind="stable")
    used_p = np.zeros(p, bool)
    used_g = np.zeros(g, bool)
    matched = 0
    for flat in order:
        i, j = divmod(int(flat), g)
        if d[i, j] > threshold:
            break
        if used_p[i] or used_g[j]:
            continue
        used_p[i] = used_g[j] = True
        matched += 1
    return matched / max(p, g)


def average_precision(preds: list, truths: list, threshold: float) -> float:
    """Mean greedy match fraction over examples, scaled to [0, 100]."""
    vals = [greedy_match_fraction(p, t, threshold) for p, t in zip(preds, truths)]
    return 100.0 * float(np.mean(vals))


def set_size_rmse(pred_sizes, true_sizes) -> float:
    p = np.asarray(pred_sizes, dtype=np.float64)
    t = np.asarray(true_sizes, dtype=np.float64)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def eval_chamfer(pred_pts: np.ndarray, pred_mask: np.ndarray,
                 true_pts: np.ndarray, true_mask: np.ndarray) -> np.ndarray:
    """Size-normalised Chamfer per example (mean per direction)."""
    return setloss.chamfer(pred_pts, true_pts, mask_a=pred_mask,
                           mask_b=true_mask, reduction="mean").values


def evaluate(bundle: Bundle, dataset, limit: int = 0) -> dict:
    c = bundle.config
    # slice first: bucketing sorts by cardinality, so stopping early on the
    # bucketed stream would evaluate only the smallest sets
    if limit:
        dataset = data_mod.subset(dataset, limit)
    pred_sizes_all, true_sizes_all, chamfers = [], [], []
    pred_sets, true_sets = [], []
    n_examples = 0
    pad_to = bundle.n_max if c.model == "dspn" else None
    for bi, batch in enumerate(data_mod.make_batches(dataset, c.batch_size,
                                                     rng=None, pad_to=pad_to,
                                                     bucket=True)):
        noise_rng = make_rng(c.data_seed, 101, bi)
        pred = bundle.predict(batch, noise_rng)
        pres = pred.presence.values
        if c.model == "dspn":
            pred_mask = (pres > c.presence_threshold).astype(np.float64)
            # a prediction must contain at least one element to score
            empty = pred_mask.sum(1) == 0
            if np.any(empty):
                top = pres.argmax(1)
                pred_mask[empty, top[empty]] = 1.0
            sizes = (pres > c.presence_threshold).sum(1)
        else:
            pred_mask = pres
            sizes = pred.sizes
        chamfers.extend(eval_chamfer(pred.points.values, pred_mask,
                                     batch.points, batch.mask).tolist())
        pred_sizes_all.extend(np.asarray(sizes).tolist())
        true_sizes_all.extend(batch.sizes.tolist())
        if c.task == "detection":
            for row in range(len(batch.sizes)):
                keep = pred_mask[row] > 0
                pred_sets.append(pred.points.values[row][keep])
                true_sets.append(batch.points[row, :batch.sizes[row]])
        n_examples += len(batch.sizes)

    out = {
        "chamfer": float(np.mean(chamfers)),
        "size_rmse": set_size_rmse(pred_sizes_all, true_sizes_all),
        "examples": float(n_examples),
    }
    if c.task == "detection":
        for name, thr in AP_THRESHOLDS.items():
            out[name] = average_precision(pred_sets, true_sets, thr)
    return out


# ---------------------------------------------------------------------------
# the run loop


def load_task_datasets(config: ExperimentConfig):
    c = config
    data_dir = c.data_dir or None
    if c.task == "set-mnist":
        train = data_mod.load_set_mnist("train", data_dir,
                                        limit=c.train_limit or None)
        test = data_mod.load_set_mnist("test", data_dir,
                                       limit=c.test_limit or None)
    else:
        train = data_mod.load_detection("train", c.train_scenes, c.data_seed)
        test = data_mod.load_detection("test", c.test_scenes, c.data_seed)
    return train, test


def _append_metrics(path: Path, rows: list) -> None:
    fresh = not path.exists()
    with open(path, "a") as f:
        if fresh:
            f.write("epoch,split,metric,value\n")
        for epoch, split, metric, value in rows:
            f.write(f"{epoch},{split},{metric},{value:.10g}\n")


def save_checkpoint(path, bundle: Bundle) -> None:
    arrays = {name: t.values for name, t in bundle.params().items()}
    arrays["_meta.n_max"] = np.float64(bundle.n_max)
    save_arrays(path, arrays)


def load_checkpoint(path, config: ExperimentConfig) -> Bundle:
    arrays = load_arrays(path)
    n_max = int(arrays.pop("_meta.n_max"))
    bundle = build_bundle(config, n_max)
    load_into(bundle.params(), arrays)
    return bundle


def load_run(run_dir) -> tuple:
    """Rebuild (bundle, config) from a run directory."""
    run_dir = Path(run_dir)
    with open(run_dir / "config.json") as f:
        config = ExperimentConfig.from_mapping(json.load(f))
    bundle = load_checkpoint(run_dir / "model.ckpt", config)
    return bundle, config


def _refresh_size_head(bundle: Bundle, train_ds, params: dict,
                       head_names: list, c: ExperimentConfig) -> float:
    """Refit the size head from scratch on frozen embeddings.

    One encoder pass over the training split is cached, then the head is
    re-initialized and takes ``card_refresh_steps`` minibatch updates with
    fresh optimizer state. The re-init matters: joint training at a high
    head rate can leave every hidden unit dead (all-negative
    preactivations), which freezes the head at the size marginal with
    exactly zero gradient flow, and no amount of further training recovers
    from that. Returns the cross-entropy of the final minibatch.
    """
    hs, ns = [], []
    pad_to = bundle.n_max if c.model == "dspn" else None
    for batch in data_mod.make_batches(train_ds, c.batch_size, rng=None,
                                       pad_to=pad_to, bucket=True):
        hs.append(bundle.condition(batch).values)
        ns.append(batch.sizes)
    H = np.concatenate(hs)
    sizes = np.concatenate(ns)

    fresh = CardinalityHead(H.shape[1], bundle.card_head.n_max,
                            make_rng(c.seed, 18))
    for name, tensor in fresh.params("cardinality").items():
        params[name].values[...] = tensor.values
    head_tensors = [params[k] for k in head_names]
    opt = dc.Adam({k: params[k] for k in head_names}, lr=c.card_lr or c.lr)

    rng = make_rng(c.seed, 17)
    ce = float("nan")
    for step in range(c.card_refresh_steps):
        if step == int(0.6 * c.card_refresh_steps):
            opt.state.lr *= 0.1
        idx = rng.integers(0, len(H), size=min(128, len(H)))
        loss = bundle.card_head.loss(dc.constant(H[idx]), sizes[idx])
        grads = dc.grad(loss, head_tensors, destroy=True)
        opt.step({k: g.values for k, g in zip(head_names, grads)})
        ce = loss.item()
    return ce


def train(config: ExperimentConfig, quiet: bool = False) -> dict:
    c = config.validate()
    t_start = time.time()
    out_dir = Path(c.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as f:
        json.dump(dataclasses.asdict(c), f, indent=1)

    train_ds, test_ds = load_task_datasets(c)
    # capacity must cover everything the run will ever decode
    bundle = build_bundle(c, max(train_ds.n_max, test_ds.n_max))
    params = bundle.params()
    names = list(params)
    tensors = [params[k] for k in names]
    # the size head trains separately (its input is detached by default),
    # so it gets its own optimizer and, optionally, its own rate
    head_names = [k for k in names if k.startswith("cardinality.")]
    main_names = [k for k in names if not k.startswith("cardinality.")]
    opt = dc.Adam({k: params[k] for k in main_names}, lr=c.lr)
    opt_head = (dc.Adam({k: params[k] for k in head_names},
                        lr=c.card_lr or c.lr)
                if head_names else None)
    metrics_path = out_dir / "metrics.csv"
    metrics_path.unlink(missing_ok=True)
    pad_to = bundle.n_max if c.model == "dspn" else None

    steps = 0
    initial_loss = None
    for epoch in range(c.epochs):
        shuffle_rng = make_rng(c.data_seed, 11, epoch)
        noise_rng = make_rng(c.data_seed, 13, epoch)
        epoch_losses = []
        for batch in data_mod.make_batches(train_ds, c.batch_size,
                                           rng=shuffle_rng, pad_to=pad_to,
                                           bucket=True):
            loss = bundle.loss(batch, noise_rng)
            if steps == 0:
                # loss of the untouched initialization, before any update
                initial_loss = loss.item()
                _append_metrics(metrics_path,
                                [(0, "train", "initial_loss", initial_loss)])
            grads = dc.grad(loss, tensors, destroy=True)
            grad_map = {k: g.values for k, g in zip(names, grads)}
            opt.step({k: grad_map[k] for k in main_names})
            if opt_head is not None:
                opt_head.step({k: grad_map[k] for k in head_names})
            epoch_losses.append(loss.item())
            steps += 1
            if loss.item() > 1e3 * max(abs(initial_loss), 1e-8):
                raise RuntimeError(
                    f"training diverged at step {steps}: loss {loss.item():.4g} "
                    f"exceeds 1000x the initial loss {initial_loss:.4g}")
        rows = [(epoch, "train", "loss", float(np.mean(epoch_losses)))]
        if c.eval_every and (epoch + 1) % c.eval_every == 0 \
                and epoch + 1 < c.epochs:
            for k, v in evaluate(bundle, test_ds, limit=c.eval_limit).items():
                rows.append((epoch, "test", k, v))
        _append_metrics(metrics_path, rows)
        if not quiet:
            print(f"epoch {epoch + 1}/{c.epochs} "
                  f"train loss {np.mean(epoch_losses):.6f}", flush=True)

    if head_names and c.card_refresh_steps > 0:
        # the size head is decoupled from the decoder, so once the encoder
        # has settled we can cheaply refit it from scratch on frozen
        # embeddings
        ce = _refresh_size_head(bundle, train_ds, params, head_names, c)
        _append_metrics(metrics_path,
                        [(c.epochs - 1, "train", "card_refresh_ce", ce)])
        if not quiet:
            print(f"size-head refresh: {c.card_refresh_steps} steps, "
                  f"final ce {ce:.4f}", flush=True)

    final = evaluate(bundle, test_ds, limit=c.eval_limit)
    _append_metrics(metrics_path,
                    [(c.epochs - 1, "test", k, v) for k, v in final.items()])
    save_checkpoint(out_dir / "model.ckpt", bundle)

    summary = {
        "config": dataclasses.asdict(c),
        "n_max": bundle.n_max,
        "steps": steps,
        "param_count": count_params(params),
        "param_count_no_image_encoder": count_params(
            params, exclude_prefixes=("image_encoder",)),
        "test": final,
        "wall_seconds": round(time.time() - t_start, 2),
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1)
    return summary


# ---------------------------------------------------------------------------
# extrapolation


def extrapolate_report(bundle: Bundle, dataset, sizes: list, count: int,
                       size_cap: int = 1000, collect_points: bool = False):
    """Decode ``count`` examples at each requested size; compare against the
    native-size reconstruction via size-normalised Chamfer.

    With ``collect_points`` the return is ``(report, panels)`` where panels
    maps each entry index to {size: (n, dim) array, "true": input points}.
    """
    c = bundle.config
    if c.model not in ("tspn", "cdspn"):
        raise ValueError("extrapolation needs a size-conditioned decoder")
    for s in sizes:
        if not 1 <= s <= size_cap:
            raise ValueError(f"requested size {s} exceeds the cap {size_cap}")
    count = min(count, len(dataset))
    entries = []
    panels = {}
    for i in range(count):
        pts = dataset.points[i]
        true_n = len(pts)
        single = data_mod.SetDataset("one", [pts], dataset.labels[i:i + 1],
                                     n_max=true_n, dim=dataset.dim)
        batch = next(data_mod.make_batches(single, 1))
        h = bundle.condition(batch)
        decoded = {}
        for j, s in enumerate([true_n] + list(sizes)):
            if c.model == "tspn":
                pred = bundle.decoder.decode(
                    h, [s], rng=make_rng(c.data_seed, 55, i, j))
            else:
                if s > bundle.n_max:
                    decoded[s] = None
                    continue
                pred, _ = bundle.decoder.decode(h, [s])
            cham = eval_chamfer(pred.points.values,
                                pred.presence.values,
                                pts[None], np.ones((1, true_n)))[0]
            decoded[s] = (float(cham), pred.points.values[0])
        native = decoded[true_n][0]
        entry = {"index": i, "label": int(dataset.labels[i]),
                 "true_size": true_n, "native_chamfer": native, "sizes": {}}
        for s in sizes:
            if decoded.get(s) is None:
                entry["sizes"][str(s)] = None
                continue
            cham = decoded[s][0]
            entry["sizes"][str(s)] = {
                "chamfer": cham,
                "ratio": cham / native if native > 0 else float("inf"),
            }
        entries.append(entry)
        if collect_points:
            panels[i] = {s: (decoded[s][1] if decoded.get(s) else None)
                         for s in sizes}
            panels[i]["true"] = pts
    report = {"count": count, "sizes": list(sizes), "entries": entries}
    if collect_points:
        return report, panels
    return report
