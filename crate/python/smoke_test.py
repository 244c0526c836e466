"""End-to-end smoke test of the mused_py extension on a tiny toy corpus.

Build the module first, for example:

    cargo build -p mused-python --features extension-module
    cp target/debug/libmused_py.so python/mused_py.so

or `maturin develop` from the repository root.
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import mused_py as m

TINY = """\
model.d = 8
model.k = 8
model.num_extraction_blocks = 2
model.vtcn_blocks = 2
model.attn_heads = 2
model.attn_dim = 8
model.rnn_hidden = 4
model.visual_width = 2
train.epochs = 1
train.batch_size = 2
train.samples_per_epoch = 2
train.val_fraction = 0
train.pretrain_mode = S
"""


def main():
    ref = [1.0, -0.5, 0.25, 0.0]
    est = [0.9, -0.4, 0.3, 0.1]
    scaled = [4.0 * v for v in est]
    assert abs(m.si_sdr(est, ref) - m.si_sdr(scaled, ref)) < 1e-9
    mix = m.mix_at_snr(ref, [0.3, 0.1, -0.2, 0.4], 5.0)
    assert len(mix) == len(ref)
    assert m.average_precision([0.9, 0.2, 0.6], [True, False, True]) == 1.0
    auroc, eer = m.roc_metrics([0.9, 0.2, 0.6, 0.1], [True, False, True, False])
    assert (auroc, eer) == (1.0, 0.0)
    try:
        m.si_sdr([1.0], [0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("zero reference accepted")

    with tempfile.TemporaryDirectory() as tmp:
        paths = m.make_toy_dataset(os.path.join(tmp, "data"), 2, 3)
        s = m.generate_mixture(paths["manifest"], "SN", 1, paths["noise_manifest"], 1.0)
        assert len(s["mixture"]) == 16000 and len(s["snr_db"]) == 2
        residual = [a - b for a, b in zip(s["mixture"], s["clean_target"])]
        assert any(abs(v) > 0 for v in residual)

        cfg = os.path.join(tmp, "tiny.cfg")
        with open(cfg, "w") as f:
            f.write(TINY)
        hist = m.pretrain(paths["manifest"], os.path.join(tmp, "pre"), cfg)
        assert len(hist) == 1 and math.isfinite(hist[0]["train_loss"])
        pre = os.path.join(tmp, "pre", "best.ckpt")
        hist = m.finetune(paths["manifest"], os.path.join(tmp, "fine"), cfg, pre, paths["noise_manifest"])
        assert math.isfinite(hist[0]["train_loss"])

        ck = m.Checkpoint.load(os.path.join(tmp, "fine", "best.ckpt"))
        assert ck.stage == "finetune", ck
        report = ck.evaluate(paths["manifest"])
        assert 0.0 <= report["map_pct"] <= 100.0
        with open(paths["manifest"]) as f:
            entry = json.loads(f.readline())
        root = os.path.dirname(paths["manifest"])
        probs = ck.predict(os.path.join(root, entry["audio_path"]), os.path.join(root, entry["frames_path"]))
        assert len(probs) == entry["num_frames"]
        assert all(0.0 <= p <= 1.0 for p in probs)
        print(ck, {k: round(v, 2) for k, v in report.items()})
    print("smoke test passed")


if __name__ == "__main__":
    main()
