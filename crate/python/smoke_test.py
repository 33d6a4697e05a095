"""Quick end-to-end check of the Python bindings."""

import math
import tempfile
from pathlib import Path

import edgeformer_py as ef


def main():
    data = ef.Dataset.generate(60, seed=1, candidates=6, widths=(4, 2, 4))
    assert len(data) == 360 and data.n_heads == 60
    train, val = data.split(0.75, seed=1)
    assert len(train) + len(val) == len(data)

    cfg = ef.ModelConfig(data.widths, d_model=8, n_heads=2, n_encoder_layers=1, ffn_dim=16)
    mae = ef.pretrain(train, cfg, epochs=2, batch_size=32, seed=0)
    assert mae.kind == "mae" and len(mae.trace) == 2

    clf = ef.finetune(train, init=mae, epochs=3, batch_size=32, seed=0)
    assert clf.kind == "classifier"
    scores = clf.scores(val)
    assert len(scores) == len(val) and all(math.isfinite(s) for s in scores)

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "clf.ckpt"
        clf.save(path)
        again = ef.Checkpoint.load(path)
        assert again.scores(val) == scores
        path.write_bytes(b"nope")
        try:
            ef.Checkpoint.load(path)
        except OSError:
            pass
        else:
            raise AssertionError("corrupt checkpoint loaded")

    base = ef.train_baseline("distmult", train, cfg, epochs=2, seed=0)
    reports = {name: ef.evaluate(m, val, seed=0) for name, m in [("et", clf), ("distmult", base), ("intimacy", "intimacy")]}
    for r in reports.values():
        assert 0.0 <= r["hits1"] <= r["hits10"] <= 1.0
        assert r["n_groups"] > 0

    t, p = ef.paired_t_test([0.5, 0.6, 0.7], [0.4, 0.6, 0.5])
    assert t > 0 and 0.0 < p < 1.0

    g = ef.grad_check(ef.ModelConfig((3, 1, 3), d_model=4, n_heads=2, n_encoder_layers=1, ffn_dim=4))
    assert g["classifier"] < 1e-4 and g["mae"] < 1e-4

    try:
        ef.ModelConfig((3, 1, 3), d_model=5, n_heads=2)
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    print({k: round(r["mrr"], 4) for k, r in reports.items()})
    print("ok")


if __name__ == "__main__":
    main()
