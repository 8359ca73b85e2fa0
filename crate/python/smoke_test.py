"""Smoke test for the Python bindings.

Build and install the extension first:

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import json
import tempfile

import xpruner_py as xp


def small_config(out_dir):
    return xp.RunConfig(
        out_dir=out_dir,
        image_size=16,
        patch_size=8,
        embed_dim=16,
        heads=2,
        train_per_class=12,
        test_per_class=6,
        baseline_epochs=3,
        mask_epochs=2,
        search_epochs=2,
        finetune_epochs=2,
        batch_size=8,
    )


def main():
    # configuration round trip and validation errors
    cfg = xp.RunConfig(alpha=0.3)
    assert cfg.get("alpha") == "0.3"
    assert xp.RunConfig.from_text(cfg.to_text()).to_text() == cfg.to_text()
    try:
        xp.RunConfig(alpha=1.5).validate()
    except xp.ConfigError as e:
        assert "alpha" in str(e)
    else:
        raise AssertionError("alpha = 1.5 should be rejected")

    # primitives
    assert xp.kept_count(1 / 3, 3) == 2
    assert xp.weighted_rate([0.4, 0.2], [100, 300]) == 0.25
    tiny = xp.Model.deit("tiny")
    assert abs(tiny.flops((3, 224, 224)) / 1.3e9 - 1) < 0.05

    with tempfile.TemporaryDirectory() as out:
        cfg = small_config(out)
        model = xp.Model(cfg)
        images, labels = xp.synth_dataset(0, 3, 2, 16, 0.1)
        logits = model.forward(images)
        assert len(logits) == len(labels) == 6 and len(logits[0]) == 3

        baseline = xp.train_baseline(cfg)
        masked = xp.train_masks(cfg, baseline)
        try:
            xp.finetune(cfg, masked)
        except xp.PipelineError:
            pass
        else:
            raise AssertionError("fine-tuning a masked checkpoint should fail")
        pruned, fold = xp.prune(cfg, masked)
        fold = json.loads(fold)
        assert abs(fold["achieved_rate"] - 0.5) <= 0.05
        finetuned = xp.finetune(cfg, pruned)

        ck = xp.Checkpoint.load(finetuned)
        assert ck.stage == "finetuned"
        assert ck.model.num_params < xp.Checkpoint.load(baseline).model.num_params
        assert len(ck.history) == 2

        rows = json.loads(xp.report(cfg, [str(baseline), str(finetuned)]))["rows"]
        assert [r["stage"] for r in rows] == ["baseline", "finetuned"]
        print(f"pruned {fold['achieved_rate']:.3f} of prunable params, "
              f"{fold['flops_ratio']:.3f} of FLOPs remain, "
              f"test accuracy {rows[1]['test_accuracy']:.3f}")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
