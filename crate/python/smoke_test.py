"""Smoke test for the `afm` Python extension.

Build and run:

    cargo build --release -p afm-python --features extension-module
    cp target/release/libafm.so python/afm.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import afm  # noqa: E402


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    assert close(afm.shannon_entropy([0.5, 0.5]), math.log(2))
    assert close(afm.shannon_entropy([0.25] * 4), math.log(4))
    assert close(afm.class_kl(1, [0.7, 0.1, 0.2]), math.log(10))
    assert afm.select_by_entropy([[0.9, 0.1], [0.5, 0.5], [0.6, 0.4]], 2) == [1, 2]
    nt = afm.nt_xent_loss([[1, 0], [0, 1]], [[1, 0], [0, 1]], temperature=1.0)
    assert close(nt, math.log((math.e + 2) / math.e), 1e-9)

    windows, labels = afm.synth_dataset(seed=1, windows_per_class=40, window_len=48)
    assert len(windows) == 160 and len(windows[0]) == 48
    assert sorted(set(labels)) == [0, 1, 2, 3]

    backbone = afm.Backbone.pretrain(
        windows, seed=1, epochs=2, d_model=8, num_blocks=1, num_heads=2, proj_dim=16, batch_size=32
    )
    assert len(backbone.pretrain_losses) == 2
    before = backbone.backbone_hash

    emb = backbone.embed(windows[:5])
    assert len(emb) == 5 and len(emb[0]) == 8

    tuned = backbone.finetune(windows, labels, head="probe", min_steps=50)
    assert tuned.backbone_hash == before
    probs = tuned.predict_proba(windows[:3])
    assert all(close(sum(p), 1.0, 1e-9) for p in probs)
    preds = tuned.predict(windows)
    acc = sum(p == l for p, l in zip(preds, labels)) / len(labels)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        tuned.save(path)
        restored = afm.Backbone.load(path)
        assert restored.predict_proba(windows[:3]) == probs

    curve = backbone.al_curve(windows, labels, strategy="al", rounds=2, seed=1, min_steps=20)
    random = backbone.al_curve(windows, labels, strategy="random", rounds=2, seed=1, min_steps=20)
    assert len(curve) == 3 and curve[0] == random[0]

    try:
        backbone.finetune(windows, labels, head="tree")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown head kind accepted")

    print(f"ok: train accuracy {acc:.3f}, AL curve {[round(p['test_accuracy'], 3) for p in curve]}")


if __name__ == "__main__":
    main()
