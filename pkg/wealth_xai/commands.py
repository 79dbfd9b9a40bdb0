"""
commands: Pipeline stages behind the CLI subcommands.

Stages and their directories (OUT is paths.out):
- generate          OUT/corpus/<hash>/ (or paths.corpus_dir)
- train             OUT/train/<hash>/
- fit-head          OUT/head/<hash>/
- explain <method>  OUT/explain/<method>/<hash>/
- eval-cross-period OUT/cross_period/<hash>/
- report            OUT/report/<hash>/

Each hash covers the config sections the stage reads plus its upstream hashes. A
directory holding stage.json is complete and the stage is skipped on rerun. A stage whose
upstream has not completed fails with a missing-stage error.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import plots, report
from .attribution import METHODS as ATTRIBUTION_METHODS
from .attribution import OcclusionSpec, attribute, attribution_output_correlation, overlay, write_map_raw, write_overlay_png
from .config import RunConfig, derive_seed, stage_hash, validate_paths
from .errors import DataError, MissingStageError, UsageError
from .eventlog import log_stage_event, utc_timestamp
from .featviz import VizSpec, visualize_unit, write_result
from .head import (
    feature_table,
    fit_ridge,
    predict,
    quintile_assign,
    read_feature_table,
    repeated_fit,
    save_model,
    split_feature_table,
    write_feature_table,
)
from .metrics import aggregate_ratings, compare_groupings, cross_period_eval, evaluate, read_ratings
from .model import ConvNet, load_checkpoint, save_checkpoint
from .perturb import fit_color_clusters, perturbation_sweep
from .pipeline import CenterTiles, extract_features, model_inputs, split_sites
from .synthgen import SiteCorpus, write_corpus
from .train import train_two_stage, write_history

logger = logging.getLogger(__name__)

PERTURB_METHODS = ("shuffle", "filter", "color")
EXPLAIN_METHODS = (*PERTURB_METHODS, *ATTRIBUTION_METHODS, "featviz")
HEAD_VARIANTS = {"1x1": "1x1", "3x3": "3x3-avg"}
FILTER_FAMILIES = {"low": "lowpass", "high": "highpass", "band": "bandpass"}
STAGE_RECORD = "stage.json"


@dataclass(frozen=True)
class Stage:
    name: str
    hash: str
    path: Path

    @property
    def record(self) -> Path:
        return self.path / STAGE_RECORD

    @property
    def complete(self) -> bool:
        return self.record.exists()

    def require(self) -> "Stage":
        if not self.complete:
            raise MissingStageError(self.name, str(self.path))
        return self

    def prepare(self) -> None:
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"cannot create stage directory {self.path}: {e}") from e

    def finish(self, cfg: RunConfig, summary: dict) -> dict:
        outputs = sorted(p.relative_to(self.path).as_posix() for p in self.path.rglob("*") if p.is_file() and p.name != STAGE_RECORD)
        record = {"stage": self.name, "hash": self.hash, "created": utc_timestamp(), "outputs": outputs, "summary": summary}
        self.record.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
        log_stage_event(run_id(cfg), self.name, {"hash": self.hash, "path": str(self.path)}, summary)
        logger.info("%s complete: %s", self.name, self.path)
        return record

    def summary(self) -> dict:
        return json.loads(self.record.read_text()).get("summary", {})


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.seed}-{stage_hash(cfg, 'run', ('corpus', 'model', 'train', 'head'))}"


# --- stage locations ----------------------------------------------------------------


def corpus_stage(cfg: RunConfig) -> Stage:
    h = stage_hash(cfg, "corpus", ("corpus",))
    path = Path(cfg.paths.corpus_dir) if cfg.paths.corpus_dir else cfg.out / "corpus" / h
    return Stage("corpus", h, path)


def train_stage(cfg: RunConfig) -> Stage:
    h = stage_hash(cfg, "train", ("model", "train"), (corpus_stage(cfg).hash,))
    return Stage("train", h, cfg.out / "train" / h)


def head_stage(cfg: RunConfig) -> Stage:
    h = stage_hash(cfg, "head", ("head",), (train_stage(cfg).hash,))
    return Stage("head", h, cfg.out / "head" / h)


def explain_stage(cfg: RunConfig, method: str, site_ids: Sequence[str] | None = None) -> Stage:
    section = "sweeps" if method in PERTURB_METHODS else "featviz" if method == "featviz" else "attribution"
    extra = {"method": method, "sites": list(site_ids) if site_ids else None}
    h = stage_hash(cfg, f"explain/{method}", (section,), (head_stage(cfg).hash,), extra)
    return Stage(f"explain/{method}", h, cfg.out / "explain" / method / h)


def cross_period_stage(cfg: RunConfig) -> Stage:
    h = stage_hash(cfg, "cross_period", ("head", "corpus"), (head_stage(cfg).hash,))
    return Stage("cross_period", h, cfg.out / "cross_period" / h)


def report_stage(cfg: RunConfig) -> Stage:
    upstream = [head_stage(cfg).hash, cross_period_stage(cfg).hash, *(explain_stage(cfg, m).hash for m in EXPLAIN_METHODS)]
    h = stage_hash(cfg, "report", (), tuple(upstream))
    return Stage("report", h, cfg.out / "report" / h)


# --- shared loaders -------------------------------------------------------------------


def open_corpus(cfg: RunConfig) -> SiteCorpus:
    return SiteCorpus(corpus_stage(cfg).require().path)


def open_network(cfg: RunConfig) -> ConvNet:
    return load_checkpoint(train_stage(cfg).require().path / "checkpoint.bin")


def load_split(cfg: RunConfig) -> tuple[list[str], list[str]]:
    data = json.loads((head_stage(cfg).require().path / "split.json").read_text())
    return data["train"], data["test"]


def _limit(ids: list[str], n: int) -> list[str]:
    return ids if n <= 0 else ids[:n]


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float) + "\n")
    return path


# --- generate ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> Stage:
    validate_paths(cfg, need_corpus=False)
    stage = corpus_stage(cfg)
    if stage.complete:
        logger.info("corpus up to date: %s", stage.path)
        return stage
    stage.prepare()
    manifest = write_corpus(stage.path, cfg.corpus.n_sites, cfg.corpus.distribution(), cfg.seed_for("corpus"), cfg.jobs)
    stage.finish(cfg, {"n_sites": len(manifest), "phases": sorted(manifest["phase"].unique().tolist())})
    return stage


# --- train ------------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> Stage:
    validate_paths(cfg)
    stage = train_stage(cfg)
    if stage.complete:
        logger.info("training up to date: %s", stage.path)
        return stage
    corpus = open_corpus(cfg)
    stage.prepare()
    net = ConvNet.build(cfg.model.feature_dim, cfg.model.channels, seed=cfg.seed_for("model.init"))
    ids = corpus.site_ids
    labels = [corpus.label(s, cfg.train.noise_floor) for s in ids]
    result = train_two_stage(net, CenterTiles(corpus, ids), labels, cfg.train.schedule(cfg.seed_for("train")))
    save_checkpoint(result.net, stage.path / "checkpoint.bin")
    write_history(result.history, stage.path / "loss_history.csv")
    plots.plot_loss(result.history, stage.path / "loss.svg")
    hist = result.history
    stage.finish(cfg, {"initial_train_loss": float(hist["train_loss"].iloc[0]), "final_train_loss": float(hist["train_loss"].iloc[-1]),
                       "epochs": int(hist["epoch"].iloc[-1])})
    return stage


# --- fit-head ---------------------------------------------------------------------------


def cmd_fit_head(cfg: RunConfig) -> Stage:
    """Features for every site in 1×1 and averaged 3×3 form, ridge head on the training
    split, evaluation on the held-out split."""
    validate_paths(cfg)
    stage = head_stage(cfg)
    if stage.complete:
        logger.info("head up to date: %s", stage.path)
        return stage
    corpus = open_corpus(cfg)
    net = open_network(cfg)
    stage.prepare()
    ids = corpus.site_ids
    train_ids, test_ids = split_sites(ids, cfg.head.test_fraction, cfg.seed_for("split"))
    _write_json(stage.path / "split.json", {"train": train_ids, "test": test_ids})
    wealth, phases = corpus.wealth(ids), corpus.phases(ids)

    reports = {}
    for variant, mode in HEAD_VARIANTS.items():
        feats = extract_features(net, corpus, ids, mode, jobs=cfg.jobs)
        write_feature_table(feature_table(ids, feats, wealth, phases), stage.path / f"features_{variant}.csv")
        reports[variant] = _fit_and_evaluate(cfg, stage.path, variant, feats, ids, train_ids, test_ids, wealth)

    (stage.path / "table1.md").write_text(report.table1(reports))
    if cfg.paths.ratings:
        _rating_comparison(cfg, stage.path, ids, test_ids, wealth)
    stage.finish(cfg, {v: {"r2": r.r2, "spearman": r.spearman} for v, r in reports.items()})
    return stage


def _fit_and_evaluate(cfg, root: Path, variant: str, feats, ids, train_ids, test_ids, wealth):
    pos = {s: i for i, s in enumerate(ids)}
    tr = [pos[s] for s in train_ids]
    te = [pos[s] for s in test_ids]
    model = fit_ridge(feats[tr], wealth[tr], cfg.head.lambda_grid, cfg.head.folds, cfg.seed_for("head"))
    save_model(model, root / f"head_{variant}.json")
    pred = predict(model, feats[te])
    ev = evaluate(wealth[te], pred)
    ev.write(root / f"eval_{variant}.json")
    ev.write_confusion(root / f"confusion_{variant}.csv")
    pd.DataFrame({"site_id": test_ids, "wealth_index": wealth[te], "predicted": pred}).to_csv(
        root / f"predictions_{variant}.csv", index=False, float_format="%.8g"
    )
    if cfg.head.repeats > 1:
        seeds = [derive_seed(cfg.seed_for("head"), f"repeat.{i}") for i in range(cfg.head.repeats)]
        stability = repeated_fit(feats[tr], wealth[tr], feats[te], wealth[te], seeds, cfg.head.lambda_grid, cfg.head.folds)
        _write_json(root / f"stability_{variant}.json", stability.summary())
    return ev


def _rating_comparison(cfg, root: Path, ids, test_ids, wealth) -> None:
    rated = aggregate_ratings(read_ratings(cfg.paths.ratings))
    sites = [s for s in test_ids if s in rated.index]
    if len(sites) < 5:
        raise DataError(f"ratings cover only {len(sites)} held-out sites; need at least 5")
    preds = pd.read_csv(root / "predictions_1x1.csv", dtype={"site_id": str}).set_index("site_id")
    truth = quintile_assign(preds.loc[sites, "wealth_index"].to_numpy())
    model_groups = quintile_assign(preds.loc[sites, "predicted"].to_numpy())
    table = compare_groupings(truth, {"CNN": model_groups, "human": rated.loc[sites].to_numpy()})
    table.to_csv(root / "table3.csv", float_format="%.6f")
    (root / "table3.md").write_text(report.table3(table))


# --- eval-cross-period ----------------------------------------------------------------------


def cmd_eval_cross_period(cfg: RunConfig) -> Stage:
    validate_paths(cfg)
    stage = cross_period_stage(cfg)
    if stage.complete:
        return stage
    head = head_stage(cfg).require()
    stage.prepare()
    df = read_feature_table(head.path / "features_1x1.csv")
    x, y = split_feature_table(df)
    order = [p for p in cfg.corpus.phases if p in set(df["phase"])]
    grid = cross_period_eval(x, y, df["phase"].tolist(), order, cfg.head.folds, cfg.head.lambda_grid, cfg.seed_for("cross_period"))
    _write_json(stage.path / "cross_period.json", grid.to_json())
    (stage.path / "table2.md").write_text(report.table2(grid))
    stage.finish(cfg, {"phases": list(grid.phases)})
    return stage


# --- explain --------------------------------------------------------------------------------


def cmd_explain(cfg: RunConfig, method: str, site_ids: Sequence[str] | None = None) -> Stage:
    if method not in EXPLAIN_METHODS:
        raise UsageError(f"unknown explain method {method!r}; valid methods: {', '.join(EXPLAIN_METHODS)}")
    validate_paths(cfg)
    stage = explain_stage(cfg, method, site_ids)
    if stage.complete:
        logger.info("%s up to date: %s", stage.name, stage.path)
        return stage
    corpus = open_corpus(cfg)
    net = open_network(cfg)
    train_ids, test_ids = load_split(cfg)
    stage.prepare()
    if method in PERTURB_METHODS:
        summary = _explain_perturbation(cfg, stage.path, method, net, corpus, train_ids, test_ids)
    elif method == "featviz":
        summary = _explain_featviz(cfg, stage.path, net)
    else:
        summary = _explain_attribution(cfg, stage.path, method, net, corpus, test_ids, site_ids)
    stage.finish(cfg, summary)
    return stage


def _sweep_kwargs(cfg: RunConfig, name: str) -> dict:
    return {
        "seed": cfg.seed_for(f"sweep.{name}"),
        "head_seed": cfg.seed_for("head"),
        "lambda_grid": cfg.head.lambda_grid,
        "folds": cfg.head.folds,
        "jobs": cfg.jobs,
    }


def _explain_perturbation(cfg, root: Path, method, net, corpus, train_ids, test_ids) -> dict:
    sw = cfg.sweeps
    train_ids = _limit(train_ids, sw.eval_sites)
    test_ids = _limit(test_ids, max(10, sw.eval_sites // 4) if sw.eval_sites else 0)
    summary: dict = {}
    if method == "shuffle":
        curves, baselines = {}, {}
        for mode in sw.modes:
            res = perturbation_sweep(net, corpus, train_ids, test_ids, "shuffle", sw.shuffle_grid,
                                     sw.shuffle_repetitions, mode, **_sweep_kwargs(cfg, "shuffle"))
            res.write_csv(root / f"shuffle_{mode}.csv")
            curves[mode], baselines[mode] = res.curve("r2"), res.baseline["r2"]
            summary[mode] = {"baseline_r2": res.baseline["r2"], "curve": res.curve("r2")["mean"].to_dict()}
        plots.plot_sweep(curves, root / "shuffle.svg", "tile size (px)", baselines=baselines, log_x=True)
        return summary
    if method == "filter":
        for kind in sw.filter_kinds:
            curves, baselines = {}, {}
            for mode in sw.modes:
                res = perturbation_sweep(net, corpus, train_ids, test_ids, FILTER_FAMILIES[kind], sw.filter_sigmas,
                                         1, mode, **_sweep_kwargs(cfg, "filter"))
                res.write_csv(root / f"filter_{kind}_{mode}.csv")
                curves[mode], baselines[mode] = res.curve("r2"), res.baseline["r2"]
                summary[f"{kind}_{mode}"] = res.curve("r2")["mean"].to_dict()
            plots.plot_sweep(curves, root / f"filter_{kind}.svg", "σ (px)", baselines=baselines, log_x=True)
        return summary
    return _explain_color(cfg, root, net, corpus, train_ids, test_ids)


def _explain_color(cfg, root: Path, net, corpus, train_ids, test_ids) -> dict:
    sw = cfg.sweeps
    fit_ids = _limit(train_ids, sw.color_fit_sites)
    model = fit_color_clusters([corpus.center(s) for s in fit_ids], sw.color_k_candidates, sw.color_sample_per_image,
                               cfg.seed_for("sweep.color.kmeans"), sw.color_use_lightness)
    _write_json(root / "clusters.json", model.to_json())
    pd.DataFrame({"k": list(model.elbow_curve), "sse": list(model.elbow_curve.values())}).to_csv(
        root / "elbow.csv", index=False, float_format="%.6f"
    )
    plots.plot_elbow(model.elbow_curve, model.k, root / "elbow.svg")
    rows = []
    baseline = None
    for family, label in (("color-chroma", "chromaticity removed"), ("color-gray", "grayed")):
        res = perturbation_sweep(net, corpus, train_ids, test_ids, family, list(range(model.k)), 1, "1x1",
                                 color_model=model, n_boot=sw.color_bootstrap, **_sweep_kwargs(cfg, "color"))
        baseline = res.baseline["r2"]
        for _, cell in res.cells.iterrows():
            rows.append({"cluster": int(cell["param"]), "ablation": label, "mean": cell["r2"],
                         "err": cell.get("r2_boot_std", np.nan), "spearman": cell["spearman"]})
    table = pd.DataFrame(rows)
    table.to_csv(root / "color.csv", index=False, float_format="%.6f")
    plots.plot_color_bars(table, root / "color.svg", baseline)
    return {"k": model.k, "centers": model.centers.tolist(), "baseline_r2": baseline}


def _tile_for(corpus, site_id: str, mode: str):
    return model_inputs(corpus, site_id, "3x3" if mode == "3x3" else "1x1")[0]


def panel_sites(site_ids: Sequence[str], wealth: np.ndarray) -> list[str]:
    """Three lowest, three median and three highest target sites, ascending by target."""
    order = np.argsort(wealth, kind="stable")
    n = len(order)
    if n <= 9:
        picks = order
    else:
        mid = n // 2 - 1
        picks = np.concatenate([order[:3], order[mid:mid + 3], order[-3:]])
    return [site_ids[i] for i in picks]


def _explain_attribution(cfg, root: Path, method, net, corpus, test_ids, site_ids) -> dict:
    ac = cfg.attribution
    occ = OcclusionSpec(ac.occlusion_patch_px, ac.occlusion_stride_px, tuple(ac.occlusion_fill))
    if site_ids:
        unknown = [s for s in site_ids if s not in set(corpus.site_ids)]
        if unknown:
            raise DataError(f"unknown site ids: {unknown}")
        chosen = list(site_ids)
        w = corpus.wealth(chosen)
        chosen = [chosen[i] for i in np.argsort(w, kind="stable")]
    else:
        chosen = panel_sites(test_ids, corpus.wealth(test_ids))
    wealth = corpus.wealth(chosen)
    images, titles, rows = [], [], []
    for sid, target in zip(chosen, wealth):
        tile = _tile_for(corpus, sid, ac.mode)
        amap = attribute(net, tile, method, occ)
        write_map_raw(amap, root / "maps" / f"{sid}.f32")
        write_overlay_png(tile, amap, root / "overlays" / f"{sid}.png")
        images.append(overlay(tile, amap))
        titles.append(f"{sid}  wealth {target:.2f}")
        rows.append({"site_id": sid, "wealth_index": float(target), "map_sum": amap.total})
    pd.DataFrame(rows).to_csv(root / "panels.csv", index=False, float_format="%.8g")
    plots.plot_panels(images, titles, root / "panels.svg")

    corr_ids = _limit(test_ids, ac.correlation_sites)
    totals, outputs = [], []
    for sid in corr_ids:
        tile = _tile_for(corpus, sid, ac.mode)
        totals.append(attribute(net, tile, method, occ).total)
        outputs.append(net.forward(tile)[1])
    r = attribution_output_correlation([np.array([t]) for t in totals], outputs)
    pd.DataFrame({"site_id": corr_ids, "map_sum": totals, "output": outputs}).to_csv(
        root / "correlation.csv", index=False, float_format="%.8g"
    )
    _write_json(root / "correlation.json", {"method": method, "sites": len(corr_ids), "pearson_r": r})
    return {"pearson_r": r, "panel_sites": chosen}


def _explain_featviz(cfg, root: Path, net) -> dict:
    fv = cfg.featviz
    images, titles, rows = [], [], []
    for i in range(fv.seeds):
        spec = VizSpec(unit=fv.unit_value(), steps=fv.steps, step_size=fv.step_size, seed=derive_seed(cfg.seed_for("featviz"), str(i)),
                       jitter_px=fv.jitter_px, smoothness_weight=fv.smoothness_weight)
        result = visualize_unit(net, spec)
        write_result(result, root, f"seed{i}")
        images.append(result.image.pixels)
        titles.append(f"init {i}: {result.trajectory[0]:.3f} → {result.trajectory[-1]:.3f}")
        rows.append({"seed": i, "initial": result.trajectory[0], "final": result.trajectory[-1]})
    pd.DataFrame(rows).to_csv(root / "featviz.csv", index=False, float_format="%.8g")
    plots.plot_panels(images, titles, root / "featviz.svg", ncols=max(1, min(3, len(images))))
    return {"runs": rows}


# --- report ---------------------------------------------------------------------------------


def cmd_report(cfg: RunConfig) -> Stage:
    validate_paths(cfg)
    train = train_stage(cfg).require()
    head = head_stage(cfg).require()
    stage = report_stage(cfg)
    if stage.complete:
        return stage
    stage.prepare()
    rb = report.ReportBuilder(stage.path, "Wealth estimation and explanation report")
    rb.text(f"\nSeed {cfg.seed}; corpus of {cfg.corpus.n_sites} synthetic sites.\n")

    rb.section("Nightlight training")
    rb.figure(train.path / "loss.svg", "training and validation loss; the bar marks the start of fine-tuning")
    rb.files([train.path / "loss_history.csv", train.path / "checkpoint.bin"])

    rb.section("Wealth estimation", (head.path / "table1.md").read_text())
    rb.files(p for p in head.path.iterdir() if p.name != STAGE_RECORD and p.suffix in (".json", ".csv"))
    if (head.path / "table3.md").exists():
        rb.section("Grouping comparison (dichotomy MCC)", (head.path / "table3.md").read_text())

    missing = []
    cp = cross_period_stage(cfg)
    if cp.complete:
        rb.section("Across survey phases", (cp.path / "table2.md").read_text())
    else:
        missing.append("eval-cross-period")

    correlations = {}
    for method in EXPLAIN_METHODS:
        st = explain_stage(cfg, method)
        if not st.complete:
            missing.append(f"explain {method}")
            continue
        rb.section(f"Explanation: {method}")
        for svg in sorted(st.path.glob("*.svg")):
            rb.figure(svg, f"{method}: {svg.stem}")
        rb.files(p for p in st.path.glob("*.csv"))
        if method in ATTRIBUTION_METHODS:
            correlations[method] = json.loads((st.path / "correlation.json").read_text())["pearson_r"]
    if correlations:
        rb.section("Summed attribution versus network output", report.table4(correlations))
    if missing:
        rb.section("Stages not run", report.missing_list(missing))
    rb.write(stage.path / "report.md")
    stage.finish(cfg, {"artifacts": len(rb.artifacts), "missing": missing})
    return stage
