"""Command-line pipeline: dataset building, training, embedding, evaluation,
explanation, phantom generation, and the retrieval service.

Every command is a thin wrapper over the library so CLI results equal library
results. Exit codes: 0 success, 2 validation problem (bad flags or inputs),
1 anything else. All options can be supplied via LIVERSEARCH_* environment
variables.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import cv2
import numpy as np
from PIL import Image

from . import metrics as metrics_mod
from .augment import AugmentConfig
from .errors import LiverSearchError, TrainingDivergedError
from .imaging.manifest import (
    DatasetManifest,
    SliceSource,
    build_manifest_from_dir,
    split_slice_id,
)
from .imaging.phantom import generate_phantom_dataset
from .imaging.volume import load_volume
from .imaging.windows import WIDE_WINDOW, clip_and_scale, pseudo_rgb
from .index import embed_dataset, save_store
from .relax import (
    DEFAULT_GRID,
    DEFAULT_N_MASKS,
    DEFAULT_P,
    generate_masks,
    normalize_for_display,
    overlay_red_blue,
    relax_importance,
    save_saliency,
)
from .selfsup.checkpoint import load_checkpoint
from .selfsup.models import EncoderSpec, HeadSpec
from .selfsup.train import TrainConfig, train

CONTEXT_SETTINGS = {"auto_envvar_prefix": "LIVERSEARCH", "help_option_names": ["-h", "--help"]}


class _ValidationError(click.ClickException):
    """Bad flags or unusable inputs; exits 2 like click's own usage errors."""

    exit_code = 2


def _handled(fn):
    """Map failures to the documented exit codes (2 validation, 1 otherwise)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except TrainingDivergedError as e:
            click.echo(f"error: {e} (diagnostics: {e.diagnostics})", err=True)
            sys.exit(1)
        except (ValueError, KeyError, FileNotFoundError, LiverSearchError) as e:
            raise _ValidationError(str(e))
        except Exception as e:  # pragma: no cover - defensive last resort
            click.echo(f"error: {e}", err=True)
            sys.exit(1)

    return wrapper


@click.group(context_settings=CONTEXT_SETTINGS)
def main():
    """Self-supervised CT liver slice retrieval toolkit."""


@main.command("build-dataset")
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("out_manifest", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--n-train-volumes", type=click.IntRange(min=0), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-liver", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--n-nonliver", type=click.IntRange(min=1), default=5, show_default=True)
@_handled
def cmd_build_dataset(data_dir, out_manifest, n_train_volumes, seed, n_liver, n_nonliver):
    """Sample a balanced slice manifest from the volumes under DATA_DIR."""
    manifest = build_manifest_from_dir(
        data_dir, n_train_volumes, seed, n_liver=n_liver, n_nonliver=n_nonliver
    )
    manifest.save(out_manifest)
    counts = manifest.counts()
    click.echo(f"wrote {out_manifest}")
    for split in sorted(counts):
        c = counts[split]
        click.echo(f"  {split}: {c['liver']} liver + {c['non_liver']} non-liver")
    if manifest.skipped_volumes:
        click.echo(f"  skipped volumes: {', '.join(manifest.skipped_volumes)}")


def _load_run_config(config_path: Path | None) -> dict:
    if config_path is None:
        return {}
    obj = json.loads(Path(config_path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ValueError("run config must be a JSON object")
    known = {"train", "augment", "encoder", "head", "single_clip"}
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"unknown run config sections: {sorted(unknown)}")
    return obj


@main.command("train")
@click.argument("manifest_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--data-root", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True, help="Directory holding the volume files.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="JSON run config; flags override its values.")
@click.option("--encoder", type=click.Choice(["tiny_conv", "resnet50"]), default=None)
@click.option("--out-dim", type=click.IntRange(min=1), default=None)
@click.option("--width", type=click.IntRange(min=1), default=None)
@click.option("--proj-dim", type=click.IntRange(min=1), default=None)
@click.option("--epochs", type=click.IntRange(min=0), default=None)
@click.option("--batch-size", type=click.IntRange(min=2), default=None)
@click.option("--lr", type=click.FloatRange(min=0.0), default=None,
              help="Override the 0.05*batch/256 default.")
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint-every", type=click.IntRange(min=0), default=None)
@click.option("--out-size", type=(int, int), default=None, help="Augmented view size H W.")
@click.option("--baseline-single-clip", is_flag=True, default=False,
              help="Use the wide window for both views.")
@click.option("--no-pretrain", is_flag=True, default=False, help="Force random encoder init.")
@click.option("--weights", "weights_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Encoder warm-start weights (implies pretrained init).")
@_handled
def cmd_train(manifest_path, out_dir, data_root, config_path, encoder, out_dim, width,
              proj_dim, epochs, batch_size, lr, seed, checkpoint_every, out_size,
              baseline_single_clip, no_pretrain, weights_path):
    """Train the siamese model over the manifest's train split."""
    run_cfg = _load_run_config(config_path)

    enc_cfg = dict(run_cfg.get("encoder", {}))
    if encoder is not None:
        enc_cfg["kind"] = encoder
    if out_dim is not None:
        enc_cfg["out_dim"] = out_dim
    if width is not None:
        enc_cfg["width"] = width
    if weights_path is not None:
        enc_cfg["init"] = "imagenet_pretrained"
        enc_cfg["weights_path"] = str(weights_path)
    if no_pretrain:
        enc_cfg["init"] = "random"
        enc_cfg.pop("weights_path", None)
    enc_cfg.setdefault("kind", "tiny_conv")
    encoder_spec = EncoderSpec(**enc_cfg)

    head_cfg = dict(run_cfg.get("head", {}))
    if proj_dim is not None:
        head_cfg["proj_dim"] = proj_dim
    head_spec = HeadSpec(**head_cfg)

    train_cfg_dict = dict(run_cfg.get("train", {}))
    for key, value in (("epochs", epochs), ("batch_size", batch_size), ("base_lr", lr),
                       ("seed", seed), ("checkpoint_every", checkpoint_every)):
        if value is not None:
            train_cfg_dict[key] = value
    train_cfg = TrainConfig(**train_cfg_dict)

    aug_cfg_dict = dict(run_cfg.get("augment", {}))
    if out_size is not None:
        aug_cfg_dict["out_size"] = list(out_size)
    augment_cfg = AugmentConfig.from_json(aug_cfg_dict) if aug_cfg_dict else AugmentConfig()

    single_clip = bool(run_cfg.get("single_clip", False)) or baseline_single_clip

    out_dir.mkdir(parents=True, exist_ok=True)
    effective = {
        "train": train_cfg.to_json(),
        "augment": augment_cfg.to_json(),
        "encoder": encoder_spec.to_json(),
        "head": head_spec.to_json(),
        "single_clip": single_clip,
        "manifest": str(manifest_path),
        "data_root": str(data_root),
    }
    (out_dir / "config.json").write_text(
        json.dumps(effective, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    manifest = DatasetManifest.load(manifest_path)
    result = train(
        manifest,
        encoder_spec,
        head_spec,
        train_cfg,
        augment_cfg,
        data_root=data_root,
        out_dir=out_dir,
        single_clip=single_clip,
    )
    final_loss = result.losses[-1] if result.losses else float("nan")
    click.echo(f"trained {train_cfg.epochs} epochs, final loss {final_loss:.4f}")
    click.echo(f"checkpoint: {result.checkpoint_path} (fingerprint {result.fingerprint})")
    if result.collapsed:
        click.echo("warning: representation collapse was detected during training", err=True)


@main.command("embed")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("manifest_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out_store", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--data-root", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True)
@click.option("--split", type=str, default="test", show_default=True)
@_handled
def cmd_embed(checkpoint, manifest_path, out_store, data_root, split):
    """Embed a manifest split with the wide window and save the store."""
    manifest = DatasetManifest.load(manifest_path)
    store = embed_dataset(checkpoint, manifest, split, data_root=data_root)
    save_store(store, out_store)
    click.echo(f"embedded {len(store)} slices (dim {store.dim}) -> {out_store}")


def _relevance_rank_over_slices(bundle, manifest, data_root, *, n_masks, n_slices, seed):
    """Mean relevance rank over a deterministic sample of liver test slices."""
    source = SliceSource(data_root)
    candidates = [
        r for r in manifest.split_records("test")
        if r.liver_label and source.mask(r) is not None and source.mask(r).any()
    ]
    if not candidates:
        return float("nan"), 0
    rng = np.random.default_rng(seed)
    if len(candidates) > n_slices:
        picks = rng.choice(len(candidates), size=n_slices, replace=False)
        candidates = [candidates[i] for i in sorted(picks)]

    size = bundle.augment_config.get("out_size")
    input_size = (int(size[0]), int(size[1])) if size else None
    scores = []
    for record in candidates:
        hu = source.hu(record)
        img = clip_and_scale(hu, WIDE_WINDOW)
        mask = source.mask(record).astype(np.uint8)
        if input_size is not None and img.shape != input_size:
            img = cv2.resize(img, (input_size[1], input_size[0]),
                             interpolation=cv2.INTER_LINEAR)
            mask = cv2.resize(mask, (input_size[1], input_size[0]),
                              interpolation=cv2.INTER_NEAREST)
        image = pseudo_rgb(np.ascontiguousarray(img, np.float32))
        masks = generate_masks(n_masks, DEFAULT_GRID, DEFAULT_P, image.shape[:2], seed)
        smap = relax_importance(bundle.model, image, masks)
        if mask.any():
            scores.append(metrics_mod.relevance_rank(smap.R, mask.astype(bool)))
    if not scores:
        return float("nan"), 0
    return float(np.mean(scores)), len(scores)


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("manifest_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--data-root", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True)
@click.option("--k", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False, path_type=Path),
              default=None)
@click.option("--database", type=click.Choice(["test_loo", "train"]), default="test_loo",
              show_default=True)
@click.option("--seeds", type=str, default="0", show_default=True,
              help="Comma-separated seeds for evaluation-time randomness.")
@click.option("--relax-masks", type=click.IntRange(min=1), default=500, show_default=True)
@click.option("--relax-slices", type=click.IntRange(min=0), default=20, show_default=True,
              help="Liver test slices scored for relevance rank (0 skips it).")
@_handled
def cmd_eval(checkpoint, manifest_path, data_root, k, report_path, database, seeds,
             relax_masks, relax_slices):
    """Embed the splits, then report MAP, kNN accuracy, and relevance rank."""
    seed_list = [int(s) for s in seeds.split(",") if s.strip() != ""]
    if not seed_list:
        raise ValueError("--seeds must name at least one seed")

    bundle = load_checkpoint(checkpoint)
    manifest = DatasetManifest.load(manifest_path)
    test_store = embed_dataset(bundle, manifest, "test", data_root=data_root)
    train_store = embed_dataset(bundle, manifest, "train", data_root=data_root)

    map_value, per_query = metrics_mod.mean_average_precision(
        test_store, k, database,
        train_store=train_store if database == "train" else None,
        return_per_query=True,
    )
    knn_value = metrics_mod.knn_accuracy(train_store, test_store, k)

    rr_values = []
    rr_counts = []
    for seed in seed_list:
        if relax_slices > 0:
            rr, n_used = _relevance_rank_over_slices(
                bundle, manifest, data_root,
                n_masks=relax_masks, n_slices=relax_slices, seed=seed,
            )
        else:
            rr, n_used = float("nan"), 0
        rr_values.append(rr)
        rr_counts.append(n_used)

    rr_mean = float(np.mean(rr_values)) if rr_values else float("nan")
    report = metrics_mod.EvalReport(
        map=map_value,
        knn_accuracy=knn_value,
        relevance_rank=rr_mean,
        k=k,
        n_queries=len(test_store),
        seed=seed_list[0],
        per_query=[{"query_id": qid, "average_precision": ap} for qid, ap in per_query],
        extras={
            "database": database,
            "seeds": seed_list,
            "relax_masks": relax_masks,
            "relax_slices_used": rr_counts,
            "model_fingerprint": bundle.fingerprint,
        },
    )
    if len(seed_list) > 1:
        report.extras.update({
            "map_std": 0.0,
            "knn_accuracy_std": 0.0,
            "relevance_rank_std": float(np.std(rr_values)),
            "relevance_rank_per_seed": rr_values,
        })
    payload = report.to_json()
    if report_path is not None:
        report.save(report_path)
        click.echo(f"wrote {report_path}")
    click.echo(json.dumps(
        {key: payload[key] for key in ("map", "knn_accuracy", "relevance_rank", "k")},
        sort_keys=True,
    ))


@main.command("explain")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("slice_id", type=str)
@click.option("--data-root", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True)
@click.option("--out", "out_png", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--n-masks", type=click.IntRange(min=1), default=DEFAULT_N_MASKS, show_default=True)
@click.option("--grid", type=(int, int), default=DEFAULT_GRID, show_default=True)
@click.option("--p", type=click.FloatRange(min=0.0, max=1.0), default=DEFAULT_P, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--alpha", type=click.FloatRange(min=0.0, max=1.0), default=0.5, show_default=True)
@_handled
def cmd_explain(checkpoint, slice_id, data_root, out_png, n_masks, grid, p, seed, alpha):
    """Render a saliency overlay PNG (plus raw map and sidecar) for one slice."""
    bundle = load_checkpoint(checkpoint)
    volume_id, index = split_slice_id(slice_id)
    header = Path(data_root) / f"{volume_id}.json"
    if not header.exists():
        header = Path(data_root) / f"{volume_id}.json.gz"
    volume = load_volume(header)
    if not 0 <= index < volume.n_slices:
        raise ValueError(f"slice index {index} out of range for volume {volume_id!r}")

    img = clip_and_scale(volume.slice_hu(index), WIDE_WINDOW)
    size = bundle.augment_config.get("out_size")
    if size is not None and img.shape != (int(size[0]), int(size[1])):
        img = cv2.resize(img, (int(size[1]), int(size[0])), interpolation=cv2.INTER_LINEAR)
    image = pseudo_rgb(np.ascontiguousarray(img, np.float32))

    masks = generate_masks(n_masks, grid, p, image.shape[:2], seed)
    smap = relax_importance(bundle.model, image, masks)
    normalized = normalize_for_display(smap.R)
    overlay = overlay_red_blue(img, normalized, alpha=alpha)
    Image.fromarray(overlay, mode="RGB").save(out_png)

    raw_path = Path(str(out_png) + ".raw.tiff")
    sidecar = save_saliency(
        smap, raw_path,
        slice_id=slice_id, model_fingerprint=bundle.fingerprint, mask_batch=masks,
    )
    click.echo(f"wrote {out_png}, {raw_path}, {sidecar}")


@main.command("phantom")
@click.argument("out_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--n-volumes", type=click.IntRange(min=1), default=13, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", type=(int, int), default=(64, 64), show_default=True)
@click.option("--liver-slices", type=click.IntRange(min=0), default=8, show_default=True)
@click.option("--nonliver-slices", type=click.IntRange(min=0), default=8, show_default=True)
@_handled
def cmd_phantom(out_dir, n_volumes, seed, size, liver_slices, nonliver_slices):
    """Generate a synthetic phantom corpus with liver masks."""
    paths = generate_phantom_dataset(
        out_dir, n_volumes, seed,
        size=size, n_liver_slices=liver_slices, n_nonliver_slices=nonliver_slices,
    )
    click.echo(f"wrote {len(paths)} volumes under {out_dir}")


@main.command("serve")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--store", "store_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--data-root", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True)
@click.option("--host", type=str, default="127.0.0.1", show_default=True)
@click.option("--port", type=click.IntRange(min=1, max=65535), default=8000, show_default=True)
@click.option("--n-masks", type=click.IntRange(min=1), default=DEFAULT_N_MASKS, show_default=True)
@click.option("--max-concurrent-explanations", type=click.IntRange(min=1), default=2,
              show_default=True)
@click.option("--auth-token", type=str, default=None)
@click.option("--cors-origin", "cors_origins", type=str, multiple=True,
              help="Allowed browser origin; repeatable. Defaults to all origins; "
                   "pass --no-cors to disable cross-origin access.")
@click.option("--no-cors", is_flag=True, default=False)
@_handled
def cmd_serve(checkpoint, store_path, data_root, host, port, n_masks,
              max_concurrent_explanations, auth_token, cors_origins, no_cors):
    """Run the retrieval HTTP service."""
    from .service import ServiceConfig, run_service

    if no_cors:
        origins: tuple[str, ...] = ()
    elif cors_origins:
        origins = tuple(cors_origins)
    else:
        origins = ("*",)
    config = ServiceConfig(
        checkpoint_path=checkpoint,
        store_path=store_path,
        data_root=data_root,
        host=host,
        port=port,
        n_masks=n_masks,
        max_concurrent_explanations=max_concurrent_explanations,
        auth_token=auth_token,
        cors_origins=origins,
    )
    run_service(config)


if __name__ == "__main__":
    main()
