"""Command-line surface: train-toy, attack, defend, tune, eval, ablate, sweep-tstar.

Every verb accepts --config (YAML with nested sections) and --seed; the
toy dataset/models are built on demand so the whole workflow runs from an
empty directory.
"""
from __future__ import annotations

import argparse
import json
import os

import numpy as np

from . import evaluation
from .attacks import PatchSpec, apply_patch, bpda_adaptive_attack, patch_attack
from .classifier import ClassifierModel, ClassifierTrainConfig, train_toy_classifier
from .core import (
    DefenseConfig,
    RngStream,
    config_hash,
    load_config,
    load_image_png,
    save_image_png,
)
from .data import make_toy_dataset
from .diffusion import Conditioning
from .localization import dump_difference_maps
from .mask_refine import dump_refine_stages
from .pipeline import DefensePipeline, IdentityDefense
from .prompt_tuning import (
    FewShotSet,
    PromptEmbedding,
    Shot,
    TuningHandles,
    init_prompt,
    tune_prompts,
)
from .toy_model import DenoiserTrainConfig, ToyDenoiser, train_toy_denoiser


def _load_cfg(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    return cfg


def _defense_config(cfg: dict) -> DefenseConfig:
    d = dict(cfg.get("defense", {}) or {})
    d.setdefault("seed", cfg["seed"])
    return DefenseConfig.from_dict(d)


def _dataset(cfg: dict):
    ds = cfg.get("dataset", {}) or {}
    return make_toy_dataset(
        n=int(ds.get("n", 800)), size=int(ds.get("size", 32)), seed=int(ds.get("seed", cfg["seed"]))
    )


def _load_models(args):
    model = ToyDenoiser.load(args.denoiser)
    clf = ClassifierModel.load(args.classifier)
    return model, clf


def _load_prompts(args, model):
    if getattr(args, "prompts", None):
        prompt_L = PromptEmbedding.load(os.path.join(args.prompts, "prompt_localization"))
        prompt_R = PromptEmbedding.load(os.path.join(args.prompts, "prompt_restoration"))
        return prompt_L.conditioning(), prompt_R.conditioning()
    form = getattr(args, "prompt_form", "manual")
    if form == "empty":
        return Conditioning.empty(), Conditioning.empty()
    pl = init_prompt(["adversarial"], model, role="localization")
    pr = init_prompt(["clean"], model, role="restoration")
    return pl.conditioning(), pr.conditioning()


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_train_toy(args):
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    images, labels, class_names = _dataset(cfg)
    if args.kind in ("denoiser", "both"):
        tc = DenoiserTrainConfig(**(cfg.get("denoiser_train", {}) or {}))
        model = train_toy_denoiser(images, labels, class_names, tc, progress=True)
        path = os.path.join(args.out, "denoiser.pt")
        model.save(path)
        print(f"saved denoiser to {path} (final loss {model.loss_history[-1]:.4f})")
    if args.kind in ("classifier", "both"):
        cc = ClassifierTrainConfig(**(cfg.get("classifier_train", {}) or {}))
        clf = train_toy_classifier(images, labels, class_names, cc)
        path = os.path.join(args.out, "classifier.pt")
        clf.save(path)
        print(f"saved classifier to {path} (val acc {clf.val_accuracy:.3f})")


def cmd_attack(args):
    cfg = _load_cfg(args)
    seed = cfg["seed"]
    _model, clf = (None, ClassifierModel.load(args.classifier))
    images, labels, _names = _dataset(cfg)
    atk = cfg.get("attack", {}) or {}
    iters = int(atk.get("iters", 100))
    area_frac = float(atk.get("area_frac", 0.05))

    rng = RngStream(seed, "attack-cli")
    indices = evaluation.select_eval_subset(images, labels, clf, args.n, rng)
    os.makedirs(args.out, exist_ok=True)
    manifest = {"attack": args.attack, "seed": seed, "iters": iters, "area_frac": area_frac, "items": []}
    for idx in indices:
        idx = int(idx)
        img_rng = RngStream(seed, ("attack", idx))
        spec, patched = patch_attack(images[idx], int(labels[idx]), clf, area_frac, iters, img_rng)
        stem = f"{idx:05d}"
        save_image_png(os.path.join(args.out, f"{stem}_adv.png"), patched)
        save_image_png(os.path.join(args.out, f"{stem}_clean.png"), images[idx])
        manifest["items"].append(
            {
                "image_id": idx,
                "label": int(labels[idx]),
                "top_left": list(spec.top_left),
                "side": spec.side,
                "area_frac": spec.area_frac,
            }
        )
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {len(indices)} attacked images + manifest to {args.out}")


def cmd_defend(args):
    cfg = _load_cfg(args)
    dcfg = _defense_config(cfg)
    model = ToyDenoiser.load(args.denoiser)
    prompt_L, prompt_R = _load_prompts(args, model)
    pipe = DefensePipeline(model, dcfg, prompt_L, prompt_R)

    os.makedirs(args.out, exist_ok=True)
    for i, path in enumerate(args.images):
        img = load_image_png(path)
        rng = RngStream(dcfg.seed, ("defend-cli", os.path.basename(path)))
        if args.debug_maps:
            capture: list = []
            soft = pipe.localize(img, rng.child("localize"), capture=capture)[0]
            dump_difference_maps(capture, os.path.join(args.out, "debug"), prefix=f"img{i}_rep")
            from .mask_refine import refine

            stages: dict = {}
            refine(soft, dcfg, stages=stages)
            dump_refine_stages(stages, os.path.join(args.out, "debug"), prefix=f"img{i}_refine_")
        res = pipe.defend(img, rng)
        stem = os.path.splitext(os.path.basename(path))[0]
        save_image_png(os.path.join(args.out, f"{stem}_restored.png"), res.image)
        save_image_png(os.path.join(args.out, f"{stem}_mask.png"), res.mask[:, :, None])
        sidecar = {
            "t_star": dcfg.t_star,
            "reps": dcfg.reps,
            "tau_bin": dcfg.tau_bin,
            "sigma_smooth": dcfg.sigma_smooth,
            "dilate_radius": dcfg.dilate_radius,
            "inpaint_steps": dcfg.inpaint_steps,
            "seed": dcfg.seed,
            "patch_found": res.patch_found,
            "config_hash": config_hash(dcfg.to_dict()),
        }
        with open(os.path.join(args.out, f"{stem}_defense.json"), "w") as f:
            json.dump(sidecar, f, indent=2)
    print(f"defended {len(args.images)} image(s) into {args.out}")


def _fewshot_from_attack_dir(attack_dir, k: int) -> FewShotSet:
    with open(os.path.join(attack_dir, "manifest.json")) as f:
        manifest = json.load(f)
    shots = []
    for item in manifest["items"][:k]:
        stem = f"{item['image_id']:05d}"
        x_adv = load_image_png(os.path.join(attack_dir, f"{stem}_adv.png"))
        x_clean = load_image_png(os.path.join(attack_dir, f"{stem}_clean.png"))
        h, w = x_adv.shape[:2]
        mask = np.zeros((h, w))
        r, c = item["top_left"]
        mask[r : r + item["side"], c : c + item["side"]] = 1.0
        shots.append(Shot(x_clean=x_clean, x_adv=x_adv, mask=mask, label=item["label"]))
    return FewShotSet(shots=shots, attack_name=manifest["attack"])


def cmd_tune(args):
    cfg = _load_cfg(args)
    dcfg = _defense_config(cfg)
    model, clf = _load_models(args)
    fewshot = _fewshot_from_attack_dir(args.attacks, args.shots)

    tcfg = cfg.get("tuning", {}) or {}
    init_L = init_prompt(["adversarial"], model, role="localization", rng=RngStream(dcfg.seed, "init-L"))
    init_R = init_prompt(["clean"], model, role="restoration", rng=RngStream(dcfg.seed, "init-R"))
    handles = TuningHandles(
        model=model,
        classifier=clf,
        cfg=dcfg,
        inpaint_steps=int(tcfg.get("inpaint_steps", 6)),
        use_ce=bool(tcfg.get("use_ce", True)),
        use_l1=bool(tcfg.get("use_l1", True)),
        use_perceptual=bool(tcfg.get("use_perceptual", True)),
    )
    result = tune_prompts(
        fewshot,
        init_L,
        init_R,
        steps=int(tcfg.get("steps", 200)),
        lr=float(tcfg.get("lr", 0.05)),
        handles=handles,
        rng=RngStream(dcfg.seed, "tune"),
    )
    os.makedirs(args.out, exist_ok=True)
    result.prompt_L.save(os.path.join(args.out, "prompt_localization"))
    result.prompt_R.save(os.path.join(args.out, "prompt_restoration"))
    result.save_trace_csv(os.path.join(args.out, "tuning_trace.csv"))
    means = result.epoch_means(fewshot.k)
    print(f"tuned prompts saved to {args.out}; first epoch mean {means[0]:.4f}, last {means[-1]:.4f}")


def _build_defense(args, cfg, dcfg, model):
    if args.defense == "undefended":
        return IdentityDefense()
    prompt_L, prompt_R = _load_prompts(args, model)
    mode = "zero_fill" if args.defense == "patchward_nr" else "inpaint"
    pipe = DefensePipeline(model, dcfg, prompt_L, prompt_R, restore_mode=mode)
    pipe.name = args.defense
    return pipe


def cmd_eval(args):
    cfg = _load_cfg(args)
    dcfg = _defense_config(cfg)
    model, clf = _load_models(args)
    images, labels, _names = _dataset(cfg)
    seed = cfg["seed"]
    atk = cfg.get("attack", {}) or {}
    iters = int(atk.get("iters", 100))
    area_frac = float(atk.get("area_frac", 0.05))

    defense = _build_defense(args, cfg, dcfg, model)
    rng = RngStream(seed, "eval-subset")
    indices = evaluation.select_eval_subset(images, labels, clf, args.n, rng)

    def defense_fn(img, rng_img):
        return defense(img, rng_img)

    attack_fn = None
    if args.attack == "advp":
        attack_fn = lambda img, label, rng_img: patch_attack(img, label, clf, area_frac, iters, rng_img)[1]
    elif args.attack == "bpda_advp":
        attack_fn = lambda img, label, rng_img: bpda_adaptive_attack(
            img, label, clf, defense, iters, rng_img, area_frac=area_frac
        )

    cfg_hash = config_hash({"defense": dcfg.to_dict(), "attack": atk, "seed": seed})
    record = evaluation.evaluate(
        defense_name=getattr(defense, "name", args.defense),
        defense_fn=defense_fn,
        attack_name=args.attack,
        attack_fn=attack_fn,
        clf=clf,
        clf_name="toy_cnn",
        images=images,
        labels=labels,
        indices=indices,
        seed=seed,
        cfg_hash=cfg_hash,
        workdir=args.out,
    )
    table = evaluation.ResultTable(metadata={"seed": seed, "config_hash": cfg_hash, "backend": "toy"})
    table.add(record)
    evaluation.emit_outputs(table, args.out)
    print(
        f"{record.defense} vs {record.attack}: clean {record.clean_acc:.1f}%, "
        f"robust {record.robust_acc:.1f}% over {record.n_images} images -> {args.out}"
    )


def cmd_ablate(args):
    cfg = _load_cfg(args)
    reference = evaluation.load_reference_table()
    rows = reference.get("ablations", {}).get(args.kind, [])
    print(f"full-scale reference rows for '{args.kind}' ({reference['note']}):")
    for row in rows:
        print("  ", row)
    print(
        "Desk-scale ablations are driven through the evaluation API "
        "(see README and tests/test_evaluation.py); use `patchward eval` with "
        "--defense/--prompt-form variants to populate each cell."
    )


def cmd_sweep_tstar(args):
    cfg = _load_cfg(args)
    dcfg = _defense_config(cfg)
    model, clf = _load_models(args)
    images, labels, _names = _dataset(cfg)
    seed = cfg["seed"]
    atk = cfg.get("attack", {}) or {}
    iters = int(atk.get("iters", 100))
    area_frac = float(atk.get("area_frac", 0.05))

    prompt_L, prompt_R = _load_prompts(args, model)
    pipe = DefensePipeline(model, dcfg, prompt_L, prompt_R)

    rng = RngStream(seed, "sweep-subset")
    indices = evaluation.select_eval_subset(images, labels, clf, args.n, rng)
    cases = []
    for idx in indices:
        idx = int(idx)
        spec, patched = patch_attack(
            images[idx], int(labels[idx]), clf, area_frac, iters, RngStream(seed, ("attack", idx))
        )
        cases.append(
            {
                "image_id": idx,
                "x_clean": images[idx],
                "x_adv": patched,
                "mask": spec.mask(*images[idx].shape[:2]),
            }
        )
    os.makedirs(args.out, exist_ok=True)
    report = evaluation.sweep_tstar(
        model,
        model.schedule,
        pipe,
        cases,
        grid=[float(g) for g in args.grid],
        seed=seed,
        out_path=os.path.join(args.out, "tstar_sweep.json"),
    )
    for row in report["grid"]:
        print(
            f"t*={row['t_star']:.2f}: purified {row['frac_purified']:.2f}, "
            f"semantic {row['frac_semantic']:.2f}, both {row['frac_both']:.2f}"
        )
    p = report["pipeline"]
    print(f"pipeline: purified {p['frac_purified']:.2f}, semantic {p['frac_semantic']:.2f}, both {p['frac_both']:.2f}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchward", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = common(sub.add_parser("train-toy", help="train the toy denoiser and/or classifier"))
    p.add_argument("--kind", choices=["denoiser", "classifier", "both"], default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_toy)

    p = common(sub.add_parser("attack", help="generate an attacked image set"))
    p.add_argument("--classifier", required=True)
    p.add_argument("--attack", choices=["advp", "lavan"], default="advp")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attack)

    p = common(sub.add_parser("defend", help="run the defense on image files"))
    p.add_argument("--denoiser", required=True)
    p.add_argument("--prompts", default=None, help="directory of tuned prompt files")
    p.add_argument("--prompt-form", choices=["manual", "empty"], default="manual")
    p.add_argument("--debug-maps", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(fn=cmd_defend)

    p = common(sub.add_parser("tune", help="few-shot prompt tuning on an attacked set"))
    p.add_argument("--denoiser", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--attacks", required=True, help="directory from `patchward attack`")
    p.add_argument("--shots", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tune)

    p = common(sub.add_parser("eval", help="clean/robust accuracy evaluation"))
    p.add_argument("--denoiser", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--prompts", default=None)
    p.add_argument("--prompt-form", choices=["manual", "empty"], default="manual")
    p.add_argument("--defense", choices=["patchward", "patchward_nr", "undefended"], default="patchward")
    p.add_argument("--attack", choices=["advp", "bpda_advp", "none"], default="advp")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = common(sub.add_parser("ablate", help="show ablation reference values and wiring"))
    p.add_argument("--kind", choices=list(evaluation.ABLATION_KINDS), required=True)
    p.set_defaults(fn=cmd_ablate)

    p = common(sub.add_parser("sweep-tstar", help="purification-vs-semantics diagnostic"))
    p.add_argument("--denoiser", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--prompts", default=None)
    p.add_argument("--prompt-form", choices=["manual", "empty"], default="manual")
    p.add_argument("--grid", nargs="+", default=["0.15", "0.5", "0.9"])
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep_tstar)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
