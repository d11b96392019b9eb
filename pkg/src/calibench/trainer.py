"""Alternating domain / class alignment training (CALI), its baselines and ICALI.

Every adversarial update is one optimizer sub-step per side. In the default
order the feature extractor moves first and its opponent (D, or the head pair)
second; ``ablation_wrong_order`` swaps that.

Learning rates: the supervised step uses ``lr_seg`` and the mixed-data step
``lr_mix``; weight regularisation uses ``lr_wr``; the DA-side G update uses
``lr_da``; both CA sub-steps use ``lr_ca``; D uses Adam at ``lr_d``. All are poly-decayed over ``max_iters``. Every objective keeps its own
optimizer buffers.
"""
from __future__ import annotations

import csv
import io
import math
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit, losses, models
from .numkit.optim import optimizer_step, poly_lr
from .numkit.rng import generator
from .numkit.tensor import ContractError, Graph, Tensor
from .synthdata import Dataset, one_hot

METHODS = ("so", "da", "ca", "cali", "icali")


class NumericAbort(RuntimeError):
    def __init__(self, msg: str, iteration: int, snapshot: str | None = None):
        super().__init__(f"{msg} at iteration {iteration}" + (f"; snapshot at {snapshot}" if snapshot else ""))
        self.iteration = iteration
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    method: str = "cali"
    max_iters: int = 5000
    interval: int = 50
    lr_seg: float = 5e-3
    lr_wr: float = 2.5e-4
    lr_da: float = 2.5e-4
    lr_ca: float = 1e-3
    lr_d: float = 1e-4
    lr_mix: float = 1e-3
    power: float = 0.9
    split_ratio: float = 0.5
    iou_window: int = 50
    icali_start: int = 1000
    ablation_wrong_order: bool = False
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 1000
    n_eval: int = 32

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.interval < 1 or self.max_iters < 1:
            raise ValueError("interval and max_iters must be >= 1")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.iou_window < 1 or self.log_every < 1 or self.n_eval < 1:
            raise ValueError("iou_window, log_every and n_eval must be >= 1")
        if self.icali_start < 0:
            raise ValueError("icali_start must be >= 0")


@contextmanager
def frozen(params: list[Tensor]):
    """Temporarily stop gradients flowing into ``params``."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def _step(bundle: models.ModelBundle, nets: tuple[str, ...], lr: float, role: str = "seg") -> None:
    for n in nets:
        optimizer_step(bundle.optimizer(n, role), bundle.params[n], lr)


def _clear(bundle: models.ModelBundle) -> None:
    for p in bundle.parameters():
        p.grad = None


# -- single updates -------------------------------------------------------------------------

def _supervised(bundle, x, y, lr) -> tuple[float, np.ndarray]:
    if y is None:
        raise ContractError("supervised_step needs labelled source data")
    with frozen(bundle.params["D"]), Graph() as g:
        p1, p2, _ = models.forward_seg(bundle, x)
        loss = losses.seg_loss(p1, p2, y)
    g.backward(loss)
    _step(bundle, ("G", "C1", "C2"), lr)
    return loss.item(), models.predict_labels(p1)


def supervised_step(bundle: models.ModelBundle, x, y, lr: float) -> float:
    """One step of G, C1, C2 on the two-head segmentation loss."""
    return _supervised(bundle, x, y, lr)[0]


def wr_step(bundle: models.ModelBundle, lr: float) -> float:
    """One step of C1, C2 down the cosine similarity of their weights; G untouched."""
    with Graph() as g:
        wr = losses.weight_regularization(models.weight_vector(bundle, "C1"),
                                          models.weight_vector(bundle, "C2"))
    g.backward(wr)
    _step(bundle, ("C1", "C2"), lr, "wr")
    return wr.item()


def _d_scores(bundle, fs, ft) -> tuple[float, float]:
    return models.discriminate(bundle, fs).item(), models.discriminate(bundle, ft).item()


def _da_generator_substep(bundle, xs, xt, lr_g):
    with frozen(bundle.params["D"]), Graph() as g:
        fs, ft = models.extract(bundle, xs), models.extract(bundle, xt)
        v1 = losses.domain_loss(models.discriminate(bundle, fs), models.discriminate(bundle, ft))
    g.backward(v1)
    _step(bundle, ("G",), lr_g, "da")


def _da_discriminator_substep(bundle, xs, xt, lr_d):
    fs, ft = models.extract(bundle, xs), models.extract(bundle, xt)
    with Graph() as g:
        ce = losses.domain_ce(models.discriminate(bundle, fs), models.discriminate(bundle, ft))
    g.backward(ce)
    _step(bundle, ("D",), lr_d)
    return fs, ft


def _da(bundle, xs, xt, lr_g, lr_d, wrong_order=False) -> tuple[float, float, float]:
    if wrong_order:
        _da_discriminator_substep(bundle, xs, xt, lr_d)
        _da_generator_substep(bundle, xs, xt, lr_g)
        fs, ft = models.extract(bundle, xs), models.extract(bundle, xt)
    else:
        _da_generator_substep(bundle, xs, xt, lr_g)
        fs, ft = _da_discriminator_substep(bundle, xs, xt, lr_d)
    ds, dt = _d_scores(bundle, fs, ft)
    return losses.domain_loss(ds, dt).item(), ds, dt


def da_step(bundle: models.ModelBundle, xs, xt, lr_g: float, lr_d: float, wrong_order: bool = False) -> float:
    """G descends V1, then D ascends it (reversed with ``wrong_order``).

    Returns V1 evaluated after both sub-steps.
    """
    return _da(bundle, xs, xt, lr_g, lr_d, wrong_order)[0]


def _ca_generator_substep(bundle, xt, lr):
    with frozen(bundle.params["C1"] + bundle.params["C2"]), Graph() as g:
        p1, p2, _ = models.forward_seg(bundle, xt)
        v2 = losses.class_alignment_loss(p1, p2)
    g.backward(v2)
    _step(bundle, ("G",), lr, "ca")


def _ca_heads_substep(bundle, xt, lr):
    f = models.extract(bundle, xt)
    with Graph() as g:
        v2 = losses.class_alignment_loss(models.classify(bundle, "C1", f), models.classify(bundle, "C2", f))
        neg = -v2
    g.backward(neg)
    _step(bundle, ("C1", "C2"), lr, "ca")


def ca_step(bundle: models.ModelBundle, xt, lr: float, wrong_order: bool = False) -> float:
    """G descends V2 on a target image, then C1/C2 ascend it. Returns V2 afterwards."""
    if wrong_order:
        _ca_heads_substep(bundle, xt, lr)
        _ca_generator_substep(bundle, xt, lr)
    else:
        _ca_generator_substep(bundle, xt, lr)
        _ca_heads_substep(bundle, xt, lr)
    p1, p2, _ = models.forward_seg(bundle, xt)
    return losses.class_alignment_loss(p1, p2).item()


# -- ICALI ----------------------------------------------------------------------------------

class ClassPerformance:
    """Per-class IoU of C1 on the most recent ``window`` source images."""

    def __init__(self, num_classes: int, window: int, split_ratio: float):
        self.num_classes = num_classes
        self.window = window
        self.split_ratio = split_ratio
        self._cms: deque[np.ndarray] = deque(maxlen=window)

    @property
    def full(self) -> bool:
        return len(self._cms) == self.window

    def update(self, y_true_ids: np.ndarray, y_pred_ids: np.ndarray) -> None:
        cm = evalkit.ConfusionMatrix(self.num_classes).accumulate(y_true_ids, y_pred_ids)
        self._cms.append(cm.counts)

    def ious(self) -> list[float | None]:
        total = evalkit.ConfusionMatrix(self.num_classes, np.sum(self._cms, axis=0) if self._cms else None)
        return evalkit.iou_per_class(total)

    def partition(self, ious: list[float | None] | None = None) -> tuple[list[int], list[int]]:
        """(well, under) class ids; the ceil(ratio*K) lowest-IoU classes are under-performing.

        Undefined IoUs rank as 0; ties go to the lower class id.
        """
        ious = self.ious() if ious is None else ious
        scores = [0.0 if v is None else v for v in ious]
        order = sorted(range(len(scores)), key=lambda k: (scores[k], k))
        n_under = math.ceil(self.split_ratio * len(scores))
        under = sorted(order[:n_under])
        well = sorted(order[n_under:])
        return well, under


def icali_build_mask(under: list[int], y_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Source mask marks pixels whose true class is under-performing; target mask is its complement."""
    ids = np.argmax(np.asarray(y_s), axis=0)
    m_s = np.isin(ids, under).astype(np.float64)
    return m_s, 1.0 - m_s


def icali_mix(x_s, y_s, x_t, o_1t, m_s, m_t) -> tuple[np.ndarray, np.ndarray]:
    """Paste masked source pixels over the target image, labels likewise."""
    m_s, m_t = np.asarray(m_s, dtype=float), np.asarray(m_t, dtype=float)
    if not (np.all((m_s == 0) | (m_s == 1)) and np.all(m_s + m_t == 1)):
        raise ContractError("masks must be binary and complementary")
    x_m = np.asarray(x_s) * m_s + np.asarray(x_t) * m_t
    y_m = np.asarray(y_s) * m_s + np.asarray(o_1t) * m_t
    return x_m, y_m


def icali_step(bundle: models.ModelBundle, x_m, y_m, lr: float) -> float:
    """One step of G and C1 on the mixed sample; C2 is left alone."""
    with frozen(bundle.params["D"] + bundle.params["C2"]), Graph() as g:
        p_m = models.classify(bundle, "C1", models.extract(bundle, x_m))
        loss = losses.mixed_loss(p_m, y_m)
    g.backward(loss)
    _step(bundle, ("G", "C1"), lr, "mix")
    return loss.item()


# -- full run -------------------------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: models.ModelBundle
    rows: list[dict]
    d_accuracy: list[tuple[int, float]] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        return log_csv(self.rows, self.bundle.config.num_classes)


def log_columns(K: int) -> list[str]:
    return (["iter", "phase", "seg_loss", "v1", "v2", "wr", "target_discrepancy"]
            + [f"iou_{k}" for k in range(K)] + ["miou"])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def log_csv(rows: list[dict], K: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = log_columns(K)
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def _finite(name: str, v: float | None, it: int, bundle, out_dir) -> None:
    if v is None or math.isfinite(v):
        return
    snap = None
    if out_dir is not None:
        snap = str(Path(out_dir) / "nan_snapshot.ckpt")
        models.save_checkpoint(bundle, snap, it)
    raise NumericAbort(f"non-finite {name}", it, snap)


def run(config: TrainConfig, source: Dataset, target: Dataset,
        arch: models.ArchitectureConfig | None = None, out_dir=None,
        progress=None) -> TrainResult:
    """Train one model and return it with its metrics log.

    Per iteration: toggle phase every ``interval`` iterations; supervised step;
    weight regularisation (two-head methods); DA and/or CA according to the
    method; for ICALI, past ``icali_start`` and once the IoU window is full, mix
    and take one extra step.
    """
    config.validate()
    arch = arch or models.ArchitectureConfig(num_classes=source.spec.num_classes,
                                             in_channels=source.spec.channels)
    bundle = models.build(arch, config.seed, lr_g=config.lr_seg, lr_d=config.lr_d)
    K = arch.num_classes
    method = config.method
    two_heads = method in ("ca", "cali", "icali")
    order_rng = generator(config.seed, "train", "order")
    perf = ClassPerformance(K, config.iou_window, config.split_ratio)
    eval_imgs = target.images[:config.n_eval]
    eval_lbls = target.labels[:config.n_eval]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    d_acc: list[tuple[int, float]] = []

    def log_row(m, phase, rec):
        cm = evalkit.evaluate_segmentation(bundle, eval_imgs, eval_lbls)
        ious = evalkit.iou_per_class(cm)
        row = {"iter": m, "phase": phase, "target_discrepancy": evalkit.target_discrepancy(bundle, eval_imgs),
               "miou": evalkit.miou(cm), **rec}
        row.update({f"iou_{k}": v for k, v in enumerate(ious)})
        rows.append(row)
        if progress:
            progress(row)

    is_domain, is_class = True, False
    log_row(0, "domain", {})
    for m in range(1, config.max_iters + 1):
        if m % config.interval == 0:
            is_domain, is_class = not is_domain, not is_class
        frac = m - 1
        lr_s = poly_lr(config.lr_seg, frac, config.max_iters, config.power)
        lr_w = poly_lr(config.lr_wr, frac, config.max_iters, config.power)
        lr_g = poly_lr(config.lr_da, frac, config.max_iters, config.power)
        lr_c = poly_lr(config.lr_ca, frac, config.max_iters, config.power)
        lr_d = poly_lr(config.lr_d, frac, config.max_iters, config.power)
        lr_x = poly_lr(config.lr_mix, frac, config.max_iters, config.power)
        i_s = int(order_rng.integers(len(source)))
        i_t = int(order_rng.integers(len(target)))
        xs, ys = source.images[i_s], source.labels[i_s]
        xt = target.images[i_t]
        rec: dict = {}

        rec["seg_loss"], o_1s = _supervised(bundle, xs, ys, lr_s)
        _finite("seg_loss", rec["seg_loss"], m, bundle, out)
        perf.update(np.argmax(ys, axis=0), o_1s)
        if two_heads:
            rec["wr"] = wr_step(bundle, lr_w)
        do_da = method == "da" or (method in ("cali", "icali") and is_domain)
        do_ca = method == "ca" or (method in ("cali", "icali") and is_class)
        if do_da:
            v1, ds, dt = _da(bundle, xs, xt, lr_g, lr_d, config.ablation_wrong_order)
            rec["v1"] = v1
            _finite("v1", v1, m, bundle, out)
            d_acc.append((m, 0.5 * ((ds > 0.5) + (dt < 0.5))))
        if do_ca:
            rec["v2"] = ca_step(bundle, xt, lr_c, config.ablation_wrong_order)
            _finite("v2", rec["v2"], m, bundle, out)
        if method == "icali" and perf.full and m > config.icali_start:
            _, under = perf.partition()
            m_s, m_t = icali_build_mask(under, ys)
            o_1t = models.predict_labels(models.classify(bundle, "C1", models.extract(bundle, xt)))
            x_m, y_m = icali_mix(xs, ys, xt, one_hot(o_1t, K), m_s, m_t)
            loss_m = icali_step(bundle, x_m, y_m, lr_x)
            _finite("mixed_loss", loss_m, m, bundle, out)

        if m % config.log_every == 0 or m == config.max_iters:
            log_row(m, "domain" if is_domain else "class", rec)
        if out is not None and m % config.checkpoint_every == 0:
            models.save_checkpoint(bundle, out / f"ckpt_{m:06d}.ckpt", m)

    cm = evalkit.evaluate_segmentation(bundle, target.images, target.labels)
    final = {"method": method, "seed": config.seed, "target_miou": evalkit.miou(cm),
             "target_iou": evalkit.iou_per_class(cm),
             "target_discrepancy": evalkit.target_discrepancy(bundle, eval_imgs)}
    src_cm = evalkit.evaluate_segmentation(bundle, source.images[:config.n_eval], source.labels[:config.n_eval])
    final["source_miou"] = evalkit.miou(src_cm)
    result = TrainResult(bundle, rows, d_acc, final)
    if out is not None:
        (out / "metrics.csv").write_text(result.csv_text())
        evalkit.write_json(final, out / "summary.json")
        models.save_checkpoint(bundle, out / "final.ckpt", config.max_iters)
    return result
