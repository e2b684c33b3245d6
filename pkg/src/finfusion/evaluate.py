"""Prediction assembly and metric tables over dataset splits.

Three views mirror the evaluation tables: micro forecasting (directional
accuracy, MAPE, hit ratio), per-institution distress classification, and
macro early warning. The multi-seed protocol retrains from scratch per seed
and aggregates with mean and sample std.
"""

import dataclasses

import numpy as np

from . import autodiff as ad
from . import datapipe as dp
from . import encoders as enc
from . import fusion as fus
from . import heads
from . import metrics as mx
from . import training as tr
from .errors import ContractError, DegenerateInputError, UndefinedMetricError

EVAL_BATCH = 64


def _forward_micro(dataset, params, cfg, pairs, kinds):
    batch = dataset.batch_arrays(pairs)
    embs = tr.embed_batch(batch, params, cfg, kinds)
    z, _ = tr.fuse_embeddings(embs, len(pairs), params, cfg)
    w, m, s = heads.micro_head_batch(
        ad.reshape(z, (len(pairs), 1, cfg.d_model)), params, cfg)
    return batch, w.data, m.data, s.data


def predict_micro(dataset, params, cfg, split: str,
                  kinds=fus.MODALITIES) -> dict:
    """Point forecasts in raw return units, with realized values."""
    pairs = dataset.sample_pairs(split)
    if not pairs:
        raise ContractError(f"split {split!r} has no usable pairs")
    preds, trues = [], []
    for i in range(0, len(pairs), EVAL_BATCH):
        chunk = pairs[i:i + EVAL_BATCH]
        batch, w, m, _ = _forward_micro(dataset, params, cfg, chunk, kinds)
        point_z = (w * m).sum(axis=-1)
        preds.append(point_z * dataset.norm["y_std"] + dataset.norm["y_mean"])
        trues.append(batch["y_raw"])
    return {"pred": np.concatenate(preds), "true": np.concatenate(trues)}


def predict_risk(dataset, params, cfg, split: str,
                 kinds=fus.MODALITIES) -> dict:
    """Per-date risk score, warning flag, node contributions, and labels."""
    dates = dataset.splits[split]
    if not dates:
        raise ContractError(f"split {split!r} has no dates")
    scores, contribs, crisis, stress, distress = [], [], [], [], []
    for i in range(0, len(dates), EVAL_BATCH):
        chunk = [(0, t) for t in dates[i:i + EVAL_BATCH]]
        batch = dataset.batch_arrays(chunk)
        embs = tr.embed_batch(batch, params, cfg, kinds)
        z, _ = tr.fuse_embeddings(embs, len(chunk), params, cfg)
        score, contrib = heads.macro_risk_batch(
            z, batch["graph_feats"], batch["graph_adj"], params, cfg)
        scores.append(score.data)
        contribs.append(contrib.data)
        crisis.append(batch["crisis_next"])
        stress.append(batch["stress_next"])
        distress.append(batch["node_distress"])
    scores = np.concatenate(scores)
    return {
        "score": scores,
        "warning": (scores >= cfg.warning_threshold).astype(np.int64),
        "contributions": np.concatenate(contribs),
        "crisis": np.concatenate(crisis),
        "stress": np.concatenate(stress),
        "node_distress": np.concatenate(distress),
    }


def _maybe(fn, *args):
    try:
        return fn(*args)
    except (UndefinedMetricError, DegenerateInputError):
        return None


def evaluate_split(dataset, params, cfg, split: str,
                   kinds=fus.MODALITIES) -> dict:
    """Flat dotted-key metric dict covering all three tables."""
    out = {}

    micro = predict_micro(dataset, params, cfg, split, kinds)
    pred, true = micro["pred"], micro["true"]
    out["micro.directional_accuracy"] = _maybe(
        mx.directional_accuracy, pred, true, cfg.flat_band)
    mape = _maybe(mx.mape_with_exclusions, true, pred)
    out["micro.mape"] = mape[0] if mape is not None else None
    out["micro.hit_ratio"] = mx.hit_ratio(pred, true, cfg.flat_band)

    risk = predict_risk(dataset, params, cfg, split, kinds)
    node_scores = risk["contributions"].reshape(-1)
    node_labels = risk["node_distress"].reshape(-1)
    node_preds = (node_scores >= cfg.warning_threshold).astype(np.int64)
    out["distress.accuracy"] = float(np.mean(node_preds == node_labels))
    _, _, f1 = mx.precision_recall_f1(node_preds, node_labels)
    out["distress.f1"] = f1
    out["distress.roc_auc"] = _maybe(mx.roc_auc, node_scores, node_labels)
    out["distress.pr_auc"] = _maybe(mx.pr_auc, node_scores, node_labels)

    try:
        acc, f1, auc = mx.early_warning_metrics(
            risk["warning"], risk["crisis"], risk["score"])
    except UndefinedMetricError:
        acc = float(np.mean(risk["warning"] == risk["crisis"]))
        _, _, f1 = mx.precision_recall_f1(risk["warning"], risk["crisis"])
        auc = None
    out["warning.accuracy"] = acc
    out["warning.f1"] = f1
    out["warning.roc_auc"] = auc
    return out


# ---------------------------------------------------------------------------
# seeded protocol

def train_run(dataset, model_cfg, train_cfg, schedule=None, seed=0,
              modalities=None, **kw) -> tr.TrainingRun:
    run = tr.TrainingRun(dataset, model_cfg, train_cfg, schedule=schedule,
                         seed=seed, modalities=modalities, **kw)
    run.run_all()
    return run


def seed_protocol(synth_cfg, model_cfg, train_cfg, schedule=None,
                  split="test", modalities=None, seeds=None, **kw):
    """Independent end-to-end runs per seed: fresh data, fresh init.

    Returns (EvalReport, list of TrainingRun).
    """
    seeds = tuple(seeds) if seeds is not None else train_cfg.seeds
    per_seed, runs = [], []
    for seed in seeds:
        scfg = dataclasses.replace(synth_cfg, seed=int(seed))
        dataset = dp.build_dataset(scfg)
        run = train_run(dataset, model_cfg, train_cfg, schedule=schedule,
                        seed=int(seed), modalities=modalities, **kw)
        kinds = modalities or fus.MODALITIES
        per_seed.append(evaluate_split(dataset, run.params, model_cfg, split,
                                       kinds=kinds))
        runs.append(run)
    return mx.aggregate_seeds(per_seed), runs


# ---------------------------------------------------------------------------
# bulletin assembly

def node_names(n: int) -> list:
    return [f"inst_{i:02d}" for i in range(n)]


def denormalize_forecast(fc: heads.MicroForecast, dataset,
                         cfg) -> heads.MicroForecast:
    """Map a z-scored mixture forecast back to raw return units.

    The affine map preserves quantiles and mixture structure; direction
    probabilities are recomputed against the raw-unit flat band.
    """
    y_std, y_mean = dataset.norm["y_std"], dataset.norm["y_mean"]
    means = fc.means * y_std + y_mean
    sigmas = fc.sigmas * y_std
    return heads.MicroForecast(
        horizon=fc.horizon,
        point=fc.point * y_std + y_mean,
        direction_probs=heads.mixture_direction_probs(
            fc.weights, means, sigmas, cfg.flat_band),
        weights=fc.weights.copy(),
        means=means,
        sigmas=sigmas,
    )


def bulletin_for_date(dataset, params, cfg, date: int, horizon: int = 1,
                      kinds=fus.MODALITIES) -> heads.PolicyBulletin:
    """Run fusion and both heads for one date and render the bulletin."""
    if not 0 <= date < dataset.n_steps or not dataset.usable[date]:
        raise ContractError(
            f"date {date} is outside the usable range of the dataset")
    pairs = [(a, date) for a in range(dataset.n_assets)]
    batch = dataset.batch_arrays(pairs)
    embs = tr.embed_batch(batch, params, cfg, kinds)
    z, _ = tr.fuse_embeddings(embs, len(pairs), params, cfg)

    graph = enc.FinancialGraph(node_features=batch["graph_feats"][0],
                               adjacency=batch["graph_adj"][0])
    # bulletins are read-only: rows of z become constants for the heads
    risk = heads.macro_risk(ad.Tensor(z.data[0].copy()), graph, params, cfg)
    forecasts = []
    for a in range(dataset.n_assets):
        hist = ad.Tensor(z.data[a:a + 1].copy())
        fc = heads.micro_forecast(hist, horizon, params, cfg)
        forecasts.append(denormalize_forecast(fc, dataset, cfg))
    return heads.generate_bulletin(risk, forecasts,
                                   node_names(dataset.n_institutions))
