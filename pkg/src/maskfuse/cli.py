"""Command-line surface: dataset generation, training, evaluation, the
IoU-matching oracle report, and the ordering-inconsistency demo.

All outputs are machine-readable CSV on stdout (and optionally a file).
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import infer
from .data import (DataFormatError, SyntheticDatasetSpec,
                   generate_synthetic_dataset, load_dataset)
from .encoder import EncoderDims, MaskEncoder
from .psm import (PSM_VARIANTS, PsmHead, canonical_inconsistency_config,
                  demo_inconsistency)
from .textenc import toy_encode
from .training import TrainConfig, load_checkpoint, save_checkpoint, train


class UsageError(Exception):
    pass


def _require_file(path, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{kind} not found: {p}")
    return p


def _write_csv(rows: list[dict], columns: list[str], out_path=None) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    text = buf.getvalue()
    sys.stdout.write(text)
    if out_path:
        Path(out_path).write_text(text)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec_file = _require_file(args.spec, "dataset spec")
    try:
        spec = SyntheticDatasetSpec.from_json(json.loads(spec_file.read_text()))
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise UsageError(f"bad dataset spec: {exc}") from exc
    categories = spec.categories()
    print(f"categories ({len(categories)}): {', '.join(categories)}")
    print(f"train samples: {spec.n_train}")
    print(f"val samples: {spec.n_val}")
    if args.dry_run:
        print("dry run: nothing written")
        return 0
    generate_synthetic_dataset(spec, args.out)
    print(f"wrote dataset to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_train_setup(config_file: Path):
    try:
        raw = json.loads(config_file.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"bad config JSON: {exc}") from exc
    encoder_dims = EncoderDims.from_json(raw.pop("encoder")) if "encoder" in raw \
        else EncoderDims()
    psm_variant = raw.pop("psm_variant", "sim_affine")
    psm_hidden = int(raw.pop("psm_hidden", 768))
    text_seed = int(raw.pop("text_seed", raw.get("seed", 0)))
    try:
        config = TrainConfig.from_json(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    return config, encoder_dims, psm_variant, psm_hidden, text_seed


def cmd_train(args) -> int:
    config_file = _require_file(args.config, "config file")
    data_dir = _require_file(args.data, "dataset directory")
    config, dims, psm_variant, psm_hidden, text_seed = _load_train_setup(config_file)
    if args.psm:
        psm_variant = args.psm

    train_set, vocab = load_dataset(data_dir, split="train")
    val_set, _ = load_dataset(data_dir, split="val")
    if not train_set:
        raise UsageError(f"no training samples in {data_dir}")
    text = toy_encode(vocab, dims.embed_dim, seed=text_seed)

    start_step = 0
    if args.resume:
        ckpt = load_checkpoint(_require_file(args.resume, "checkpoint"),
                               config=config, override=args.force_config)
        encoder, psm_head = ckpt.encoder, ckpt.psm
        if ckpt.text_embeddings is not None:
            text = ckpt.text_embeddings
        start_step = ckpt.step
    else:
        encoder = MaskEncoder(dims, seed=config.seed)
        psm_head = PsmHead(psm_variant, embed_dim=dims.embed_dim,
                           hidden=psm_hidden, seed=config.seed)

    result = train(config, train_set, encoder, text, psm_head,
                   val_dataset=val_set or None, start_step=start_step)

    out = Path(args.out)
    save_checkpoint(out, encoder, psm_head, config, result.steps_run,
                    text_embeddings=text, vocab=vocab)
    rows = [{**m, "val_maskacc": ("" if m["val_maskacc"] is None else m["val_maskacc"])}
            for m in result.metrics]
    _write_csv(rows, ["step", "lr", "loss", "val_maskacc"], out / "metrics.csv")
    if result.aborted:
        print("training aborted on non-finite loss; last good checkpoint kept",
              file=sys.stderr)
        return 1
    print(f"checkpoint written to {out} (step {result.steps_run})")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_eval_state(args):
    ckpt_dir = _require_file(args.ckpt, "checkpoint")
    data_dir = _require_file(args.data, "dataset directory")
    ckpt = load_checkpoint(ckpt_dir)
    samples, vocab = load_dataset(data_dir, split=args.split)
    if not samples:
        raise UsageError(f"no samples in split {args.split!r} of {data_dir}")
    text = ckpt.text_embeddings
    if text is None:
        text = toy_encode(vocab, ckpt.encoder.dims.embed_dim, seed=0)
    else:
        try:
            text.verify_vocab(vocab, force=args.force_vocab)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return ckpt, samples, vocab, text


def cmd_eval(args) -> int:
    ckpt, samples, vocab, text = _load_eval_state(args)
    use_psm = args.use_psm == "on"
    if args.mode == "maskacc":
        acc = infer.mask_acc(ckpt.encoder, ckpt.psm, text, samples, use_psm=use_psm)
        _write_csv([{"metric": "maskacc", "value": acc}],
                   ["metric", "value"], args.out)
        return 0

    # mIoU mode: external proposals, or ground-truth masks as the fallback.
    if not args.proposals and not args.gt_masks:
        raise UsageError("miou mode needs --proposals DIR or --gt-masks")
    preds = []
    gts = []
    for sample in samples:
        if args.gt_masks:
            masks = sample.masks
            probs = infer.classify_masks(ckpt.encoder, ckpt.psm, text,
                                         sample.image, masks, use_psm=use_psm)
        else:
            proposals = infer.load_proposals(args.proposals, sample.sample_id)
            masks = proposals.masks
            probs = infer.classify_masks(ckpt.encoder, ckpt.psm, text,
                                         sample.image, masks, use_psm=use_psm)
            probs = infer.ensemble(probs, proposals, args.gamma)
        preds.append(infer.assemble_semantic(masks, probs))
        gts.append(sample.category_raster())
    result = infer.miou(preds, gts, len(vocab))
    rows = [{"metric": f"iou/{vocab.names[k]}", "value": result.per_class[k]}
            for k in range(len(vocab)) if not np.isnan(result.per_class[k])]
    rows.append({"metric": "miou", "value": result.mean})
    _write_csv(rows, ["metric", "value"], args.out)
    return 0


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def cmd_oracle(args) -> int:
    data_dir = _require_file(args.data, "dataset directory")
    prop_dir = _require_file(args.proposals, "proposal directory")
    samples, vocab = load_dataset(data_dir, split=args.split)
    if not samples:
        raise UsageError(f"no samples in split {args.split!r} of {data_dir}")
    n_cat = len(vocab)
    gen_preds, oracle_preds, gts = [], [], []
    for sample in samples:
        proposals = infer.load_proposals(prop_dir, sample.sample_id)
        if not proposals.in_vocab_map:
            raise UsageError(f"proposals for {sample.sample_id} carry no "
                             "generator-to-evaluation vocabulary map")
        gen_probs = infer.generator_probs(proposals, n_cat)
        gen_preds.append(infer.assemble_semantic(proposals.masks, gen_probs))
        assigned = infer.oracle_assign(proposals.masks, sample.masks,
                                       sample.labels, n_cat)
        oracle_preds.append(assigned.semantic_map)
        gts.append(sample.category_raster())
    gen_miou = infer.miou(gen_preds, gts, n_cat).mean
    oracle_miou = infer.miou(oracle_preds, gts, n_cat).mean
    _write_csv([
        {"metric": "generator_miou", "value": gen_miou},
        {"metric": "oracle_miou", "value": oracle_miou},
        {"metric": "gap", "value": oracle_miou - gen_miou},
    ], ["metric", "value"], args.out)
    return 0


# ---------------------------------------------------------------------------
# demo-inconsistency
# ---------------------------------------------------------------------------


def cmd_demo_inconsistency(args) -> int:
    config = canonical_inconsistency_config()
    if args.theta == "identity":
        config.theta = np.eye(2)
    if args.lr is not None:
        config.lr = args.lr
    rows = demo_inconsistency(config)
    _write_csv([{
        "step": r.step, "s1": r.s1, "s2": r.s2, "r1": r.r1, "r2": r.r2,
        "s_rank_correct": r.s_rank_correct, "r_rank_correct": r.r_rank_correct,
    } for r in rows], ["step", "s1", "s2", "r1", "r2",
                       "s_rank_correct", "r_rank_correct"], args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskfuse",
        description="Mask-conditioned region classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--spec", required=True, help="dataset spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dry-run", action="store_true", help="print the plan, write nothing")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fine-tune on a dataset")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--force-config", action="store_true",
                   help="resume even if the config digest differs")
    p.add_argument("--psm", choices=PSM_VARIANTS, help="override similarity head variant")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--mode", required=True, choices=("maskacc", "miou"))
    p.add_argument("--proposals", help="proposal directory for miou mode")
    p.add_argument("--gt-masks", action="store_true",
                   help="use ground-truth masks as proposals in miou mode")
    p.add_argument("--gamma", type=float, default=0.1,
                   help="generator score ensemble weight in [0, 1] (0 disables)")
    p.add_argument("--use-psm", default="on", choices=("on", "off"),
                   help="score with the similarity head or raw cosine")
    p.add_argument("--force-vocab", action="store_true",
                   help="allow text embeddings bound to a different vocabulary")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="generator vs IoU-matching-oracle mIoU report")
    p.add_argument("--proposals", required=True, help="proposal directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("demo-inconsistency",
                       help="one-step gradient demo: refined ordering improves, raw degrades")
    p.add_argument("--theta", default="canonical", choices=("canonical", "identity"))
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_demo_inconsistency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
