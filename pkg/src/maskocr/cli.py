"""Command line entry point: ``maskocr <command> [--config F] [--seed N] [--out DIR] [--device D]``.

Every command writes into ``--out`` the resolved config, a line-delimited
training/eval log (where applicable), a ``metrics.json`` and its products
(checkpoints, datasets, images).  Logged values carry no wall-clock data,
so a rerun with the same config and seed reproduces them exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .ablation import SUITES, AblationRunner, build_toy_data, toy_world
from .checkpoint import Checkpoint
from .config import config_hash, dump_config, load_config, setup_from_config
from .data import TextDataset, Vocab, load_subst_table
from .finetune import evaluate, finetune, linear_probe
from .pretrain_language import masked_char_accuracy, pretrain_decoder, pretrain_decoder_ctc
from .pretrain_visual import MIMConfig, MIMPretrainer, batch_mask, pretrain_encoder, reconstruct, save_triptych
from .synth import build_dataset
from .training import StageConfig


class CLIError(RuntimeError):
    pass


class Run:
    """Resolved config, toy setup and output directory shared by every command."""

    def __init__(self, args):
        self.args = args
        self.cfg = load_config(args.config)
        self.setup = setup_from_config(self.cfg)
        self.seed = args.seed
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._toy = None
        dump_config(self.cfg, self.out / "config.yaml")

    @property
    def vocab(self) -> Vocab:
        return self.setup.vocab

    def toy(self):
        if self._toy is None:
            self._toy = build_toy_data(self.setup)
        return self._toy

    def dataset(self, manifest, split, toy_split: str) -> TextDataset:
        if manifest is None:
            return getattr(self.toy(), toy_split)
        C, H, W = self.setup.canvas
        return TextDataset.from_manifest(manifest, self.vocab, self.setup.num_queries, self.cfg["preprocess_mode"],
                                         (H, W), self.setup.model["patch_width"], channels=C, split=split)

    def stage(self, name: str) -> StageConfig:
        return StageConfig.from_dict(self.cfg[name])

    def metrics(self, **values) -> dict:
        rec = {"command": self.args.command, "seed": self.seed, "config_hash": config_hash(self.cfg), **values}
        (self.out / "metrics.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
        print(json.dumps(rec, sort_keys=True))
        return rec


def _load(path) -> Checkpoint:
    if path is None:
        return None
    return Checkpoint.load(path)


def cmd_synthesize(run: Run):
    corpus, fonts, real, synth, canvas = toy_world(run.setup)
    style = real if run.args.style == "real" else synth
    manifest = build_dataset(corpus, fonts, style, canvas, run.args.n, run.out, run.seed)
    run.vocab.save(run.out / "vocab.txt")
    return run.metrics(manifest=str(manifest.name), samples=run.args.n, style=run.args.style)


def cmd_pretrain_encoder(run: Run):
    a = run.args
    images = run.toy().visual if a.data is None else run.dataset(a.data, a.split, "finetune").images
    ckpt, _, log = pretrain_encoder(run.setup.model_config(), images, run.stage("visual_stage"),
                                    MIMConfig.from_dict(run.setup.mim), run.seed, run.out / "log.jsonl")
    ckpt.save(run.out / "encoder.pt")
    last = [r for r in log.records if r.get("summary")][-1]
    return run.metrics(checkpoint="encoder.pt", content_hash=ckpt.content_hash(),
                       loss_total=last["loss_total"], loss_pixel=last["loss_pixel"], loss_align=last["loss_align"])


def cmd_pretrain_decoder(run: Run):
    a = run.args
    ds = run.dataset(a.data, a.split, "language")
    enc = _load(a.encoder)
    cfg = run.setup.model_config(head=a.head)
    fn = pretrain_decoder if a.head == "query" else pretrain_decoder_ctc
    ckpt, model, log = fn(cfg, enc, ds, run.stage("language_stage"), run.setup.char_mask_ratio, run.seed,
                          not a.retrain_encoder, run.out / "log.jsonl")
    ckpt.save(run.out / "decoder.pt")
    values = {"checkpoint": "decoder.pt", "content_hash": ckpt.content_hash(),
              "encoder_hash": ckpt.group_hash("encoder."), "parent_hash": ckpt.parent_hash,
              "loss_total": log.records[-1]["loss_total"] if log.records else None}
    if a.head == "query":
        values["masked_char_accuracy"] = masked_char_accuracy(model, ds, run.setup.char_mask_ratio, run.seed)
    return run.metrics(**values)


def _eval_kwargs(run: Run) -> dict:
    e = run.cfg["eval"]
    table = load_subst_table(e["subst_table"]) if e.get("subst_table") else None
    return {"lowercase": e["lowercase"], "strip_spaces": e["strip_spaces"], "subst_table": table}


def cmd_finetune(run: Run):
    a = run.args
    init = _load(a.init)
    train = run.dataset(a.data, a.split, "finetune")
    val = run.dataset(a.val, "val" if a.val else None, "val") if (a.val or a.data is None) else None
    s = run.setup
    cfg = init.model_config if init is not None else s.model_config()
    stage = run.stage("finetune_stage")
    if stage.lr is None:
        stage.lr = s.finetune_lr_scratch if init is None else s.finetune_lr_pretrained
    ckpt, report, _, _ = finetune(cfg, init, train, run.vocab, val, stage, run.seed, run.out / "log.jsonl",
                                  augment_data=bool(run.cfg["augment"]))
    ckpt.save(run.out / "finetune.pt")
    return run.metrics(checkpoint="finetune.pt", content_hash=ckpt.content_hash(),
                       val_accuracy=report.accuracy if report.count else None)


def cmd_probe(run: Run):
    a = run.args
    ckpt = _load(a.ckpt)
    train = run.dataset(a.data, a.split, "finetune")
    val = run.dataset(a.val, "val", "val") if (a.val or a.data is None) else None
    out, report, model, _ = linear_probe(ckpt, train, run.vocab, val, run.stage("probe_stage"), run.seed,
                                         run.out / "log.jsonl")
    out.save(run.out / "probe.pt")
    test = run.dataset(a.test, "test", "test") if (a.test or a.data is None) else None
    acc = evaluate(model, test, run.vocab, **_eval_kwargs(run)).accuracy if test is not None else None
    return run.metrics(checkpoint="probe.pt", val_accuracy=report.accuracy if report.count else None,
                       test_accuracy=acc)


def cmd_eval(run: Run):
    a = run.args
    ckpt = _load(a.ckpt)
    ds = run.dataset(a.data, a.split, "test")
    rep = evaluate(ckpt, ds, run.vocab, **_eval_kwargs(run), name=a.data or "toy_test")
    with open(run.out / "log.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"stage": "eval", **rep.to_dict()}, sort_keys=True) + "\n")
    return run.metrics(accuracy=rep.accuracy, count=rep.count, checkpoint_hash=ckpt.content_hash())


def cmd_ablate(run: Run):
    a = run.args
    runner = AblationRunner(run.setup, run.out, verbose=a.verbose)
    suites = SUITES if a.suite == "all" else [a.suite]
    seeds = [run.seed + i for i in range(a.n_seeds)]
    out = {}
    for suite in suites:
        res = runner.run(suite, seeds)
        out[suite] = {row: {"mean": r.mean, "std": r.std, "per_seed": r.per_seed} for row, r in res.items()}
    return run.metrics(seeds=seeds, results=out)


def cmd_reconstruct_dump(run: Run):
    a = run.args
    ckpt = _load(a.ckpt)
    if not any(k.startswith("mim.") for k in ckpt.params):
        raise CLIError("reconstruct-dump needs a visual-pretraining checkpoint (with regressor and decoder)")
    model = MIMPretrainer.from_checkpoint(ckpt)
    ds = run.dataset(a.data, a.split, "test")
    images = ds.images[: a.n]
    mask = batch_mask(images.shape[0], model.cfg.num_patches, model.mim.mask_ratio,
                      np.random.default_rng(run.seed))
    inp, masked, recon = reconstruct(model, images, mask)
    path = save_triptych(inp, masked, recon, run.out / "triptych.png")
    return run.metrics(image=path.name, samples=int(images.shape[0]),
                       masked_patches=int(mask.sum()))


COMMANDS = {
    "synthesize": cmd_synthesize,
    "pretrain-encoder": cmd_pretrain_encoder,
    "pretrain-decoder": cmd_pretrain_decoder,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "reconstruct-dump": cmd_reconstruct_dump,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML file layered over the shipped defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--device", default="cpu", help="torch device; this build runs on cpu")

    p = argparse.ArgumentParser(prog="maskocr", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    def data_args(sp):
        sp.add_argument("--data", default=None, help="manifest.jsonl; default: the in-memory toy split")
        sp.add_argument("--split", default=None, help="manifest split to use (train/val/test)")

    s = add("synthesize", "render a toy dataset to disk")
    s.add_argument("--style", choices=["real", "synth"], default="synth")
    s.add_argument("--n", type=int, default=1000)

    s = add("pretrain-encoder", "masked image modeling on unlabeled images")
    data_args(s)

    s = add("pretrain-decoder", "masked image-language pretraining of the decoder")
    data_args(s)
    s.add_argument("--encoder", default=None, help="visual-pretraining checkpoint; omit for a random encoder")
    s.add_argument("--retrain-encoder", action="store_true", help="let the encoder train too (ablation)")
    s.add_argument("--head", choices=["query", "ctc"], default="query")

    s = add("finetune", "supervised training on labeled images")
    data_args(s)
    s.add_argument("--init", default=None, help="checkpoint to start from; omit to train from scratch")
    s.add_argument("--val", default=None, help="validation manifest (split 'val')")

    s = add("probe", "train only the classifier on top of a frozen checkpoint")
    data_args(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--val", default=None)
    s.add_argument("--test", default=None)

    s = add("eval", "sequence accuracy of a checkpoint")
    data_args(s)
    s.add_argument("--ckpt", required=True)

    s = add("ablate", "run an ablation suite on the toy world")
    s.add_argument("--suite", choices=list(SUITES) + ["all"], default="vl_table")
    s.add_argument("--n-seeds", type=int, default=3)
    s.add_argument("--verbose", action="store_true")

    s = add("reconstruct-dump", "save input / masked / reconstruction triptychs")
    data_args(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=8)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if torch.device(args.device).type != "cpu":
        print(f"maskocr: device {args.device!r} not supported; this build runs on cpu", file=sys.stderr)
        return 2
    torch.use_deterministic_algorithms(True)
    try:
        COMMANDS[args.command](Run(args))
    except (CLIError, ValueError, OSError, RuntimeError) as exc:
        print(f"maskocr {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
