"""Command-line entry point: ``wmnseg <subcommand> [options]``.

Subcommands mirror the workflow: phantom -> preprocess -> train-synthesis /
train-segmentation -> infer -> evaluate -> stats -> report. Every run
writes ``manifest.json`` next to its outputs. Hyperparameters come from
``--config`` (YAML); flags only select files, modes and seeds.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, config as cfgmod, engine, metrics, phantom, stats, taxonomy
from .preprocess import PreprocessError, PreprocessRecord, contrast_stretch, external_step
from .volume import (LabelMap, Volume, load_labelmap, load_mask, load_volume, save_labelmap,
                     save_mask, save_volume)

log = logging.getLogger("wmnseg")


class CLIError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _tool_versions() -> dict:
    import nibabel
    import scipy
    import sklearn
    import torch

    return {"python": platform.python_version(), "wmnseg": __version__,
            "numpy": np.__version__, "scipy": scipy.__version__, "torch": torch.__version__,
            "nibabel": nibabel.__version__, "scikit-learn": sklearn.__version__,
            "pandas": pd.__version__}


# wall-clock logs and the manifests themselves stay out of input checksums
_UNHASHED = ("manifest.json", "timings.json", "train_log.jsonl")


def write_manifest(out: Path, command: str, cfg: dict, inputs=(), extra=None) -> None:
    files = {}
    for p in inputs:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and f.name not in _UNHASHED:
                    files[f"{p.name}/{f.relative_to(p).as_posix()}"] = _sha256(f)
        elif p.exists():
            files[p.name] = _sha256(p)
    manifest = {"command": command, "config_hash": cfgmod.config_hash(cfg),
                "seed": cfg["seed"], "inputs": files, "tools": _tool_versions(),
                **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def subject_dirs(data: Path) -> list[Path]:
    root = Path(data) / "subjects"
    if not root.is_dir():
        raise CLIError(f"{data}: expected a 'subjects/' directory of per-subject folders")
    dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not dirs:
        raise CLIError(f"{root}: no subject folders")
    return dirs


def split_subjects(ids: list[str], split: dict) -> dict:
    out, pos = {}, 0
    for part in ("train", "val", "test"):
        spec = split[part]
        if isinstance(spec, list):
            missing = set(spec) - set(ids)
            if missing:
                raise CLIError(f"split.{part} names unknown subjects: {sorted(missing)}")
            out[part] = list(spec)
        else:
            out[part] = ids[pos:pos + spec]
            pos += spec
    if sum(len(v) for v in out.values()) and not out["train"]:
        raise CLIError("split selects no training subjects")
    return out


def _map(fn, items, jobs: int):
    if jobs and jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _need(path: Path, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise CLIError(f"missing {what}: {path}")
    return Path(path)


# -- subcommands ---------------------------------------------------------------------

def _render_subject(job):
    sid, spec_dict, out = job
    spec = phantom.PhantomSpec.from_dict(spec_dict)
    mprage, wmn, labels, brain = phantom.generate_phantom(spec)
    d = Path(out) / "subjects" / sid
    d.mkdir(parents=True, exist_ok=True)
    save_volume(mprage, d / "mprage.nii.gz")
    save_volume(wmn, d / "wmn.nii.gz")
    save_labelmap(labels, d / "labels.nii.gz")
    save_mask(brain, mprage, d / "brain_mask.nii.gz")
    (d / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return phantom.structure_volumes(labels)


def cmd_phantom(args, cfg):
    out = _out_dir(args.out)
    ph = cfg["phantom"]
    if args.spec == "default":
        base = phantom.PhantomSpec.from_dict(ph["spec"])
    else:
        base = phantom.PhantomSpec.from_dict(json.loads(_need(Path(args.spec), "spec").read_text()))
    specs = list(phantom.cohort_specs(ph["n_controls"], ph["n_patients"], base,
                                      ph["atrophy"], seed=cfg["seed"]))
    taxonomy.to_json(out / "taxonomy.json")
    vols = _map(_render_subject, [(sid, s.to_dict(), str(out)) for sid, _, _, _, s in specs],
                args.jobs)
    rows = [{"subject_id": sid, "diagnosis": dx, "age_years": age, "icv_mm3": icv, **v}
            for (sid, dx, age, icv, _), v in zip(specs, vols)]
    pd.DataFrame(rows, columns=phantom.cohort_columns()).to_csv(
        out / "cohort.csv", index=False, float_format="%.6f")
    write_manifest(out, "phantom", cfg, extra={"n_subjects": len(rows), "spec": args.spec})
    print(f"wrote {len(rows)} phantom subjects to {out}")


def _preprocess_subject(job):
    d, out, pcfg, assume = job
    d, out = Path(d), Path(out)
    dst = out / "subjects" / d.name
    dst.mkdir(parents=True, exist_ok=True)
    rec = PreprocessRecord(mask_ref="brain_mask.nii.gz")  # relative to the subject folder
    tools = pcfg["tools"]
    contrasts = [c for c in ("mprage", "wmn") if (d / f"{c}.nii.gz").exists()]
    if not contrasts:
        raise CLIError(f"{d}: no mprage.nii.gz")
    if not assume:
        # bias correction per contrast, brain extraction on MPRAGE, WMn registered to MPRAGE
        cur = {c: d / f"{c}.nii.gz" for c in contrasts}
        for c in contrasts:
            out_p = dst / f"{c}_n4.nii.gz"
            external_step("bias_correct", {"in": cur[c]}, tools["bias_correct"], out_p, rec)
            cur[c] = out_p
        mask_p = dst / "brain_mask_raw.nii.gz"
        external_step("brain_extract", {"in": cur["mprage"]}, tools["brain_extract"], mask_p, rec)
        if "wmn" in cur:
            reg = dst / "wmn_reg.nii.gz"
            external_step("affine_register", {"in": cur["wmn"], "ref": cur["mprage"]},
                          tools["affine_register"], reg, rec, reference=cur["mprage"])
            cur["wmn"] = reg
        mask = load_mask(mask_p)
        vols = {c: load_volume(p) for c, p in cur.items()}
    else:
        mask = load_mask(_need(d / "brain_mask.nii.gz", "brain mask"))
        vols = {c: load_volume(d / f"{c}.nii.gz") for c in contrasts}
        rec.append("assume_preprocessed")
    records = {}
    for c, v in vols.items():
        r = PreprocessRecord(steps=list(rec.steps), mask_ref=rec.mask_ref)
        save_volume(contrast_stretch(v, mask, pcfg["p_low"], pcfg["p_high"], r),
                    dst / f"{c}.nii.gz")
        records[c] = r.to_dict()
    save_mask(mask, vols["mprage"], dst / "brain_mask.nii.gz")
    if (d / "labels.nii.gz").exists():
        save_labelmap(load_labelmap(d / "labels.nii.gz"), dst / "labels.nii.gz")
    (dst / "preprocess.json").write_text(json.dumps(records, indent=2, sort_keys=True))
    return d.name


def cmd_preprocess(args, cfg):
    data = _need(args.data, "data directory")
    dirs = subject_dirs(data)
    tools = cfg["preprocess"]["tools"]
    if not args.assume_preprocessed and not all(tools.values()):
        missing = [k for k, v in tools.items() if not v]
        raise CLIError(f"no tool configured for {missing}; set preprocess.tools in the config "
                       "or pass --assume-preprocessed")
    out = _out_dir(args.out)
    done = _map(_preprocess_subject,
                [(str(d), str(out), cfg["preprocess"], args.assume_preprocessed) for d in dirs],
                args.jobs)
    for name in ("cohort.csv", "taxonomy.json"):
        if (data / name).exists():
            (out / name).write_bytes((data / name).read_bytes())
    write_manifest(out, "preprocess", cfg, [data],
                   {"assume_preprocessed": bool(args.assume_preprocessed)})
    print(f"preprocessed {len(done)} subjects into {out}")


def _load_subjects(data: Path, ids, image="mprage", target=None, override=None):
    out = []
    for sid in ids:
        d = data / "subjects" / sid
        s = engine.Subject.from_dir(d, image=image, target=target)
        if override is not None:
            s = engine.Subject(sid, override(s), s.mask, s.labels, s.target)
        out.append(s)
    return out


def _splits(data: Path, cfg) -> dict:
    return split_subjects([d.name for d in subject_dirs(data)], cfg["split"])


def cmd_train_synthesis(args, cfg):
    data = _need(args.data, "data directory")
    sp = _splits(data, cfg)
    tc = cfgmod.train_config(cfg, "synthesis", train_subjects=sp["train"],
                             val_subjects=sp["val"])
    out = _out_dir(args.out)
    engine.train(tc, _load_subjects(data, sp["train"], target="wmn"),
                 _load_subjects(data, sp["val"], target="wmn"), out,
                 resume=args.resume)
    write_manifest(out, "train-synthesis", cfg, [data], {"train_config_hash": tc.config_hash()})
    print(f"synthesis checkpoints in {out}")


def cmd_train_segmentation(args, cfg):
    data = _need(args.data, "data directory")
    sp = _splits(data, cfg)
    mode = args.mode
    override, image = None, "mprage"
    if mode == "scs":
        if cfg["scs_train_input"] == "true_wmn":
            image = "wmn"
        else:
            ck = _need(args.synthesis_checkpoint, "synthesis checkpoint (--synthesis-checkpoint)")
            model = engine.Checkpoint.load(ck).model(best=True)
            override = lambda s: engine.predict_synthesis(model, s.image, s.mask)
    tc = cfgmod.train_config(cfg, "segmentation", train_subjects=sp["train"],
                             val_subjects=sp["val"])
    out = _out_dir(args.out)
    engine.train(tc, _load_subjects(data, sp["train"], image, override=override),
                 _load_subjects(data, sp["val"], image, override=override), out,
                 resume=args.resume)
    inputs = [data] + ([args.synthesis_checkpoint] if override is not None else [])
    write_manifest(out, "train-segmentation", cfg, inputs,
                   {"mode": mode, "train_config_hash": tc.config_hash()})
    print(f"{mode.upper()} segmentation checkpoints in {out}")


def cmd_infer(args, cfg):
    data = _need(args.data, "data directory")
    mode = args.mode
    if args.segmentation_checkpoint is None or not Path(args.segmentation_checkpoint).exists():
        raise CLIError(f"infer --mode {mode}: missing segmentation checkpoint "
                       f"(--segmentation-checkpoint {args.segmentation_checkpoint})")
    if mode == "scs" and (args.synthesis_checkpoint is None
                          or not Path(args.synthesis_checkpoint).exists()):
        raise CLIError("infer --mode scs: missing synthesis checkpoint "
                       f"(--synthesis-checkpoint {args.synthesis_checkpoint})")
    models = {"segmentation": engine.Checkpoint.load(args.segmentation_checkpoint)}
    if mode == "scs":
        models["synthesis"] = engine.Checkpoint.load(args.synthesis_checkpoint)
    models = {k: v.model(best=True) for k, v in models.items()}
    ids = args.subjects or _splits(data, cfg)["test"] or [d.name for d in subject_dirs(data)]
    out = _out_dir(args.out)
    timings = {}
    bs = cfg["infer"]["batch_size"]
    for sid in ids:
        d = data / "subjects" / sid
        img = load_volume(_need(d / "mprage.nii.gz", "MPRAGE"), provenance="preprocessed")
        mask = load_mask(_need(d / "brain_mask.nii.gz", "brain mask"))
        res = engine.run_pipeline(mode, models, img, mask, batch_size=bs)
        od = out / sid
        od.mkdir(exist_ok=True)
        save_labelmap(res.labelmap, od / "labels.nii.gz")
        save_labelmap(res.labelmap_gated, od / "labels_gated.nii.gz")
        save_mask(res.thalamus_mask, img, od / "thalamus_mask.nii.gz")
        if res.synthesized is not None:
            save_volume(res.synthesized, od / "wmn_synth.nii.gz")
        timings[sid] = res.timings
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    ckpts = [p for p in (args.segmentation_checkpoint, args.synthesis_checkpoint) if p]
    write_manifest(out, "infer", cfg, ckpts, {"mode": mode, "subjects": ids})
    print(f"{mode.upper()} predictions for {len(ids)} subjects in {out}")


def _parse_pred(items) -> dict:
    out = {}
    for it in items:
        if "=" not in it:
            raise CLIError(f"--pred expects NAME=DIR, got {it!r}")
        name, path = it.split("=", 1)
        out[name.lower()] = _need(Path(path), f"prediction directory for {name}")
    return out


def cmd_evaluate(args, cfg):
    data = _need(args.data, "data directory")
    preds = _parse_pred(args.pred)
    if not preds:
        raise CLIError("evaluate needs at least one --pred NAME=DIR")
    out = _out_dir(args.out)
    tables, per_subject, syn = {}, {}, {}
    common = sorted(set.intersection(*[{p.name for p in d.iterdir() if p.is_dir()}
                                       for d in preds.values()]))
    if not common:
        raise CLIError("prediction directories share no subjects")
    cohort = pd.read_csv(data / "cohort.csv") if (data / "cohort.csv").exists() else None
    rows = {sid: {"subject_id": sid} for sid in common}
    for sid in common:
        gt = load_labelmap(data / "subjects" / sid / "labels.nii.gz")
        rows[sid].update(phantom.structure_volumes(gt, "gt"))
    for name, pdir in preds.items():
        scores = []
        for sid in common:
            gt = load_labelmap(data / "subjects" / sid / "labels.nii.gz")
            pred = load_labelmap(pdir / sid / "labels.nii.gz")
            thal = load_mask(pdir / sid / "thalamus_mask.nii.gz")
            sc = metrics.score_subject(gt, pred, thal, sid)
            scores.append(sc)
            per_subject.setdefault(sid, {})[name] = sc.to_dict()
            rows[sid].update(phantom.structure_volumes(pred, name))
            synth = pdir / sid / "wmn_synth.nii.gz"
            ref = data / "subjects" / sid / "wmn.nii.gz"
            if synth.exists() and ref.exists():
                s = metrics.synthesis_metrics(load_volume(ref, "preprocessed"),
                                              load_volume(synth, "synthesized"),
                                              load_mask(data / "subjects" / sid / "brain_mask.nii.gz"),
                                              sid)
                syn.setdefault(name, []).append(s.to_dict())
        tables[name] = metrics.score_cohort(scores)
        tables[name].to_csv(out / f"scores_{name}.csv", float_format="%.6f")
    metrics.comparison_table({k.upper(): v for k, v in tables.items()}).to_csv(
        out / "table4.csv", float_format="%.6f")
    vol = pd.DataFrame(list(rows.values()))
    if cohort is not None:
        vol = cohort[list(stats.BASE_COLUMNS)].merge(vol, on="subject_id")
    vol.to_csv(out / "volumes.csv", index=False, float_format="%.6f")
    report = {"per_subject": per_subject,
              "cohort": {k: v.reset_index().to_dict(orient="records") for k, v in tables.items()},
              "synthesis": syn}
    metrics.write_json(report, out / "evaluation.json")
    write_manifest(out, "evaluate", cfg, [data, *preds.values()])
    print(f"evaluated {len(common)} subjects x {len(preds)} pipelines into {out}")


def cmd_stats(args, cfg):
    path = _need(args.cohort, "cohort table (--cohort)")
    df = pd.read_csv(path)
    sources = stats.sources_in(df)
    stats.validate_cohort(df, sources)
    out = _out_dir(args.out)
    alpha = cfg["stats"]["alpha"]
    report = {"alpha": alpha, "n": len(df), "groups": {}, "bland_altman": {}, "paired_ttests": {}}
    if df["diagnosis"].nunique() == 2:
        for src in sources:
            report["groups"][src] = stats.group_analysis(df, src, alpha).to_dict()
    else:
        log.warning("single-diagnosis cohort: skipping ANCOVA")
    for src in sources:
        if src == "gt" or "gt" not in sources:
            continue
        scatter, summary = stats.bland_altman_table(df, src)
        scatter.to_csv(out / f"bland_altman_{src}.csv", index=False, float_format="%.6f")
        report["bland_altman"][src] = {k: v.to_dict() for k, v in summary.items()}
        report["paired_ttests"][src] = {
            a: stats.paired_ttest(df[f"{src}_{a}_mm3"], df[f"gt_{a}_mm3"], alpha).to_dict()
            for a in (*taxonomy.ABBREVS, "Thal")}
    metrics.write_json(report, out / "stats.json")
    write_manifest(out, "stats", cfg, [path])
    print(f"statistics for {len(df)} subjects ({', '.join(sources)}) in {out}")


def cmd_report(args, cfg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out_dir(args.out)
    written = []
    for d in map(Path, args.inputs):
        _need(d, "report input")
        for csv in sorted(d.glob("bland_altman_*.csv")):
            src = csv.stem.split("_", 2)[2]
            df = pd.read_csv(csv)
            for struct, g in df.groupby("structure", sort=False):
                fig, ax = plt.subplots(figsize=(4, 3.2))
                ax.scatter(g["mean_mm3"], g["diff_mm3"], s=12)
                ax.axhline(g["bias"].iloc[0], color="k")
                for k in ("loa_low", "loa_high"):
                    ax.axhline(g[k].iloc[0], color="k", linestyle="--")
                ax.set_xlabel("mean volume (mm$^3$)")
                ax.set_ylabel(f"{src.upper()} - GT (mm$^3$)")
                ax.set_title(struct)
                fig.tight_layout()
                p = out / f"bland_altman_{src}_{struct}.png"
                fig.savefig(p, dpi=100)
                plt.close(fig)
                written.append(p)
        for logf in sorted(d.rglob("train_log.jsonl")):
            recs = [json.loads(x) for x in logf.read_text().splitlines() if x.strip()]
            fig, ax = plt.subplots(figsize=(4, 3.2))
            ax.plot([r["epoch"] for r in recs], [r["train_loss"] for r in recs], label="train")
            if any(r["val_loss"] is not None for r in recs):
                ax.plot([r["epoch"] for r in recs], [r["val_loss"] for r in recs], label="val")
            ax.set_xlabel("epoch")
            ax.set_ylabel("loss")
            ax.legend()
            fig.tight_layout()
            name = "_".join(logf.relative_to(d).parent.parts) or d.name
            p = out / f"loss_{name}.png"
            fig.savefig(p, dpi=100)
            plt.close(fig)
            written.append(p)
        if (d / "table4.csv").exists():
            p = out / "table4.csv"
            p.write_bytes((d / "table4.csv").read_bytes())
            written.append(p)
    if not written:
        raise CLIError("nothing to report: no bland_altman_*.csv, train_log.jsonl or table4.csv "
                       "in the inputs")
    write_manifest(out, "report", cfg, [], {"outputs": sorted(str(p.name) for p in written)})
    print(f"wrote {len(written)} report files to {out}")


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (hyperparameters, split, tools)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel per-subject workers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wmnseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="generate a synthetic cohort")
    s.add_argument("--spec", default="default", help="'default' or a PhantomSpec JSON file")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", parents=[common], help="normalize subject images")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--assume-preprocessed", action="store_true",
                   help="inputs are already registered, bias corrected and skull stripped")
    s.set_defaults(func=cmd_preprocess)

    for name, fn in (("train-synthesis", cmd_train_synthesis),
                     ("train-segmentation", cmd_train_segmentation)):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--data", required=True, type=Path)
        s.add_argument("--resume", type=Path, help="checkpoint to continue from")
        if name == "train-segmentation":
            s.add_argument("--mode", choices=("ncs", "scs"), default="ncs")
            s.add_argument("--synthesis-checkpoint", type=Path)
        s.set_defaults(func=fn)

    s = sub.add_parser("infer", parents=[common], help="run the NCS or SCS pipeline")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--mode", choices=("ncs", "scs"), required=True)
    s.add_argument("--segmentation-checkpoint", type=Path)
    s.add_argument("--synthesis-checkpoint", type=Path)
    s.add_argument("--subjects", nargs="*", help="subject ids (default: the test split)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", parents=[common], help="score predictions against labels")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--pred", action="append", default=[], metavar="NAME=DIR")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("stats", parents=[common], help="agreement and ANCOVA statistics")
    s.add_argument("--cohort", required=True, type=Path, help="volumes CSV")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("report", parents=[common], help="render tables and plots")
    s.add_argument("inputs", nargs="+", help="directories from evaluate/stats/train runs")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.seed)
        engine.set_numeric_mode(cfg["synthesis"]["threads"])
        args.func(args, cfg)
    except (CLIError, cfgmod.ConfigError, PreprocessError, engine.TrainingError,
            engine.PipelineError, stats.StatsError, metrics.MetricError, FileNotFoundError,
            ValueError) as exc:
        print(f"wmnseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
