"""Command-line entry point.

    sae-ocsvm phantom     --out DATA
    sae-ocsvm train       --data DATA --out model.sae
    sae-ocsvm fit-score   --data DATA --model model.sae --out MAPS [--voxelwise]
    sae-ocsvm postprocess --data DATA --maps MAPS --out MAPS_PP
    sae-ocsvm evaluate    --data DATA --maps MAPS --out EVAL
    sae-ocsvm report      --metrics EVAL/metrics.tsv [...] --out REPORT

Options come from ``--config FILE`` plus ``--set section.key=value``
overrides.  Exit codes: 0 success, 1 computation error, 2 usage error.
"""
import argparse
import hashlib
import logging
import os
import platform
import shutil
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, SaeOcsvmError
from .io.config import RunConfig, format_config, parse_config
from .io.container import load_sae, save_patient_model, save_sae
from .io.nifti import read_anomaly_map, read_mask, read_volume, write_anomaly_map, write_volume

log = logging.getLogger("sae_ocsvm")

MANIFEST_COLUMNS = ("case", "role", "group", "volume", "brain", "lesion", "csf_seg_a", "csf_seg_b")
CASE_FILES = {"volume": "volume.nii.gz", "brain": "brain.nii.gz", "lesion": "lesion.nii.gz",
              "csf_seg_a": "csf_seg_a.nii.gz", "csf_seg_b": "csf_seg_b.nii.gz"}


class UsageError(Exception):
    pass


# outputs ---------------------------------------------------------------------
class Outputs:
    """Tracks files and directories created by a command so failures leave nothing behind."""

    def __init__(self):
        self.files, self.dirs = [], []

    def mkdir(self, path):
        if not os.path.isdir(path):
            os.makedirs(path)
            self.dirs.append(path)
        return path

    def add(self, path):
        self.files.append(path)
        return path

    def rollback(self):
        for f in reversed(self.files):
            if os.path.exists(f):
                os.remove(f)
        for d in reversed(self.dirs):
            shutil.rmtree(d, ignore_errors=True)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command, cfg, inputs, outputs):
    """Reproducibility record: versions, full configuration, input and output digests."""
    import scipy

    lines = [
        f"command = {command}",
        f"sae_ocsvm = {__version__}",
        f"python = {platform.python_version()}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        f"seed.run = {cfg.run.seed}",
        f"seed.sae = {cfg.sae.seed}",
        f"seed.phantom = {cfg.phantom.seed}",
        "",
        "[config]",
        format_config(cfg).rstrip("\n"),
        "",
        "[inputs]",
    ]
    lines += [f"{_sha256(p)}  {os.path.basename(p)}" for p in inputs if os.path.isfile(p)]
    lines += ["", "[outputs]"]
    lines += [f"{_sha256(p)}  {os.path.basename(p)}" for p in outputs if os.path.isfile(p)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# dataset manifest ------------------------------------------------------------
def read_dataset(root):
    path = os.path.join(root, "manifest.tsv")
    if not os.path.isfile(path):
        raise UsageError(f"{root}: no manifest.tsv found")
    with open(path, encoding="utf-8") as fh:
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    header, rows = rows[0], rows[1:]
    for col in ("case", "role", "volume", "brain"):
        if col not in header:
            raise UsageError(f"{path}: missing column {col!r}")
    cases = []
    for r in rows:
        rec = dict(zip(header, r))
        for col in CASE_FILES:
            if rec.get(col):
                rec[col] = os.path.join(root, rec[col])
        cases.append(rec)
    return cases


def _role(cases, role):
    return [c for c in cases if c["role"] == role]


def _mask(rec, key):
    if not rec.get(key):
        raise UsageError(f"case {rec['case']}: no {key} entry in the manifest")
    return read_mask(rec[key])


# commands --------------------------------------------------------------------
def cmd_phantom(args, cfg, out):
    from .phantom import case_rng, generate_control, generate_patient

    root = out.mkdir(args.out)
    rows, created = [], []
    specs = [("control", i) for i in range(cfg.run.n_controls)] + [("patient", i) for i in range(cfg.run.n_patients)]
    for role, index in specs:
        gen = generate_control if role == "control" else generate_patient
        case = gen(cfg.phantom, case_rng(cfg.phantom, role, index))
        name = f"{role}_{index:03d}"
        out.mkdir(os.path.join(root, name))
        items = {"volume": case.volume, "brain": case.brain_mask, "lesion": case.lesion_mask,
                 "csf_seg_a": case.csf_segmentations[0], "csf_seg_b": case.csf_segmentations[1]}
        rel = {}
        for key, obj in items.items():
            rel[key] = f"{name}/{CASE_FILES[key]}"
            p = out.add(os.path.join(root, rel[key]))
            write_volume(obj, p)
            created.append(p)
        p = out.add(os.path.join(root, name, "csf.nii.gz"))
        write_volume(case.csf_mask, p)
        created.append(p)
        rows.append([name, role, ""] + [rel[k] for k in MANIFEST_COLUMNS[3:]])
    mpath = out.add(os.path.join(root, "manifest.tsv"))
    with open(mpath, "w", encoding="utf-8") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        fh.writelines("\t".join(r) + "\n" for r in rows)
    created.append(mpath)
    write_manifest(out.add(os.path.join(root, "run_manifest.txt")), "phantom", cfg, [], created)


def cmd_train(args, cfg, out):
    from .sae import train_sae

    controls = _role(read_dataset(args.data), "control")
    if len(controls) < 2:
        raise UsageError("training needs at least two control cases")
    vols = [read_volume(c["volume"]) for c in controls]
    masks = [_mask(c, "brain") for c in controls]
    model, history = train_sae(vols, masks, cfg.sae, n_pairs=cfg.run.n_pairs)
    save_sae(model, out.add(args.out))
    hpath = out.add(args.out + ".history.tsv")
    with open(hpath, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\tval_cosine\n")
        fh.write(f"0\tnan\t{history.initial_val_loss!r}\t{history.initial_val_cosine!r}\n")
        for e, (t, v, c) in enumerate(zip(history.train_loss, history.val_loss, history.val_cosine), 1):
            fh.write(f"{e}\t{t!r}\t{v!r}\t{c!r}\n")
    inputs = [c["volume"] for c in controls] + [c["brain"] for c in controls]
    write_manifest(out.add(args.out + ".manifest.txt"), "train", cfg, inputs, [args.out, hpath])


def cmd_fit_score(args, cfg, out):
    from .pipeline import encode_region, fit_patient_model, fit_voxelwise_models, score_volume, score_voxelwise

    from .volume import eligible_mask

    cases = read_dataset(args.data)
    patients = _role(cases, "patient")
    if not patients:
        raise UsageError("no patient cases in the dataset")
    encoder = load_sae(args.model)
    root = out.mkdir(args.out)
    threads = cfg.run.threads
    created = []
    if args.voxelwise:
        controls = _role(cases, "control")
        region = np.zeros(read_mask(patients[0]["brain"]).shape, dtype=bool)
        for p in patients:
            region |= eligible_mask(_mask(p, "brain"), encoder.config.patch_size)
        latents = np.stack([encode_region(read_volume(c["volume"]), region, encoder, threads) for c in controls])
        vw = fit_voxelwise_models(latents, region, encoder.fingerprint(), cfg.ocsvm.nu, cfg.solver)
    for k, p in enumerate(patients):
        vol, brain = read_volume(p["volume"]), _mask(p, "brain")
        if args.voxelwise:
            amap = score_voxelwise(vw, vol, brain, encoder, threads)
        else:
            rng = np.random.default_rng([cfg.run.seed, k])
            pm = fit_patient_model(vol, brain, encoder, cfg.ocsvm.nu, cfg.ocsvm.n_train, rng, cfg.solver)
            mp = out.add(os.path.join(root, f"{p['case']}.model"))
            save_patient_model(pm, mp, seed=[cfg.run.seed, k])
            created.append(mp)
            amap = score_volume(vol, brain, encoder, pm, threads)
        path = out.add(os.path.join(root, f"{p['case']}.nii.gz"))
        write_anomaly_map(amap, path, vol.voxel_size_mm)
        created.append(path)
    write_manifest(out.add(os.path.join(root, "run_manifest.txt")), "fit-score", cfg,
                   [args.model] + [p["volume"] for p in patients], created)


def cmd_postprocess(args, cfg, out):
    from .postproc import apply_exclusion, refine_csf_mask

    patients = _role(read_dataset(args.data), "patient")
    root = out.mkdir(args.out)
    created = []
    for p in patients:
        src = os.path.join(args.maps, f"{p['case']}.nii.gz")
        amap = read_anomaly_map(src)
        excl = refine_csf_mask(_mask(p, "csf_seg_a"), _mask(p, "csf_seg_b"), _mask(p, "brain"))
        ep = out.add(os.path.join(root, f"{p['case']}_exclusion.nii.gz"))
        write_volume(excl, ep)
        mp = out.add(os.path.join(root, f"{p['case']}.nii.gz"))
        write_anomaly_map(apply_exclusion(amap, excl), mp)
        created += [ep, mp]
    write_manifest(out.add(os.path.join(root, "run_manifest.txt")), "postprocess", cfg, [], created)


def _write_metrics(path, method, records):
    from .metrics import METRICS, RAW_METRICS

    cols = ["method", "case", "group"] + list(METRICS + RAW_METRICS) + ["best_dice_threshold", "n_lesions"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in records:
            vals = [method, r["case"], r.get("group") or ""] + [repr(float(r[k])) for k in cols[3:-1]] + [str(r["n_lesions"])]
            fh.write("\t".join(vals) + "\n")


def read_metrics(path):
    """{method: [record, ...]} from a metrics.tsv written by ``evaluate``."""
    with open(path, encoding="utf-8") as fh:
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    header, out = rows[0], {}
    for r in rows[1:]:
        rec = dict(zip(header, r))
        for k in header[3:]:
            rec[k] = float(rec[k])
        rec["group"] = rec["group"] or None
        out.setdefault(rec.pop("method"), []).append(rec)
    return out


def _write_report(report, root, out):
    from .metrics import to_text, to_tsv

    paths = []
    for name, text in (("report.tsv", to_tsv(report)), ("report.txt", to_text(report))):
        p = out.add(os.path.join(root, name))
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(text)
        paths.append(p)
    return paths


def cmd_evaluate(args, cfg, out):
    from .metrics import aggregate_report, evaluate_map

    patients = _role(read_dataset(args.data), "patient")
    root = out.mkdir(args.out)
    method = args.method or os.path.basename(os.path.normpath(args.maps))
    records = []
    for p in patients:
        amap = read_anomaly_map(os.path.join(args.maps, f"{p['case']}.nii.gz"))
        m = evaluate_map(amap, _mask(p, "lesion"), cfg.metrics.connectivity, cfg.metrics.fpr_limit)
        m.update(case=p["case"], group=p.get("group") or None)
        records.append(m)
    mp = out.add(os.path.join(root, "metrics.tsv"))
    _write_metrics(mp, method, records)
    report = aggregate_report({method: records}, alpha=cfg.metrics.alpha, bonferroni=cfg.metrics.bonferroni)
    created = [mp] + _write_report(report, root, out)
    write_manifest(out.add(os.path.join(root, "run_manifest.txt")), "evaluate", cfg, [], created)


def cmd_report(args, cfg, out):
    from .metrics import aggregate_report

    combined = {}
    for path in args.metrics:
        for method, recs in read_metrics(path).items():
            if method in combined:
                raise UsageError(f"method {method!r} appears in more than one metrics file")
            combined[method] = recs
    root = out.mkdir(args.out)
    report = aggregate_report(combined, alpha=cfg.metrics.alpha, bonferroni=cfg.metrics.bonferroni)
    created = _write_report(report, root, out)
    write_manifest(out.add(os.path.join(root, "run_manifest.txt")), "report", cfg, list(args.metrics), created)


# argument parsing ------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (section.key = value lines)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration entry, e.g. sae.epochs=5")
    common.add_argument("--threads", type=int, help="worker threads for encoding and scoring")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sae-ocsvm", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-controls", type=int)
    p.add_argument("--n-patients", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", parents=[common], help="train the auto-encoder on the controls")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-score", parents=[common], help="per-patient models and anomaly maps")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--voxelwise", action="store_true", help="one OC-SVM per voxel trained on the controls")
    p.set_defaults(func=cmd_fit_score)

    p = sub.add_parser("postprocess", parents=[common], help="exclude the refined CSF mask")
    p.add_argument("--data", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", parents=[common], help="per-patient metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", help="method label (default: name of the maps directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="aggregate metrics of several methods")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _load_config(args):
    text = ""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    cfg = parse_config(text, args.config or "<defaults>")
    overrides = []
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.append(f"{key.strip()} = {value.strip()}")
    if getattr(args, "n_controls", None) is not None:
        overrides.append(f"run.n_controls = {args.n_controls}")
    if getattr(args, "n_patients", None) is not None:
        overrides.append(f"run.n_patients = {args.n_patients}")
    if args.threads is not None:
        overrides.append(f"run.threads = {args.threads}")
    if overrides:
        # later entries win: re-serialise, drop overridden keys, then append overrides
        keys = {o.split("=", 1)[0].strip() for o in overrides}
        base = [l for l in format_config(cfg).splitlines() if l.split("=", 1)[0].strip() not in keys]
        cfg = parse_config("\n".join(base + overrides), "<command line>")
    return cfg


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"sae-ocsvm: error: {exc}", file=sys.stderr)
        return 2
    out = Outputs()
    try:
        args.func(args, cfg, out)
    except UsageError as exc:
        out.rollback()
        print(f"sae-ocsvm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SaeOcsvmError, ValueError, OSError, FloatingPointError) as exc:
        out.rollback()
        print(f"sae-ocsvm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        out.rollback()
        raise
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
