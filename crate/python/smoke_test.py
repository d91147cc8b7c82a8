"""Smoke test for the tsvc Python extension.

Build and install first:

    pip install --no-build-isolation ./crates/python
    python python/smoke_test.py
"""

import math
import os
import tempfile

import tsvc


def check_numerics():
    v = [0.0, 0.0, 1.0, 1.0]
    assert abs(tsvc.mutual_information(v, v, bins=2) - math.log(2)) < 1e-9
    x = [math.sin(i) for i in range(64)]
    y = [math.cos(3 * i) for i in range(64)]
    assert abs(tsvc.mutual_information(x, y) - tsvc.mutual_information(y, x)) < 1e-10
    assert abs(tsvc.mutual_information(x, x) - tsvc.entropy(x)) < 1e-10

    rates = tsvc.change_rates_from_mi(0.8, 0.4, 0.6, 0.7)
    assert abs(tsvc.soft_label(*rates) - 0.615385) < 1e-6
    assert tsvc.soft_label(0.0, 0.0, 0.0) == 1.0
    assert tsvc.adaptive_margin(1.0, 0.0) == 0.4

    losses = [0.1 + 0.01 * (i % 7) for i in range(60)] + [0.9 + 0.01 * (i % 5) for i in range(40)]
    gmm = tsvc.fit_gmm(losses)
    clean, noisy = gmm.partition(losses, delta=0.5)
    assert sorted(clean) == list(range(60)) and sorted(noisy) == list(range(60, 100))
    assert abs(gmm.clean_center - min(gmm.means)) < 1e-12


def check_data_and_training():
    splits = tsvc.generate(n=400, noise_ratio=0.4, seed=3)
    assert len(splits.train) == 320 and splits.train.noisy_count == 128
    assert splits.val.noisy_count == 0

    result = tsvc.train(splits, mode="tsvc", seed=1, epochs=6, warmup_epochs=2, batch_size=64)
    assert result.names == ["coordinator", "master", "assistant"]
    assert len(result.rsum) == 6
    report = tsvc.evaluate(result.eval_models, splits.val)
    assert report["rsum"] == result.final_rsum

    enc = result.models[1]
    sim = enc.similarity_matrix(splits.val.images()[:8], splits.val.texts()[:8])
    assert len(sim) == 8 and all(len(r) == 8 for r in sim)
    assert tsvc.retrieval_report(sim)["rsum"] >= 0.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.tsvm")
        enc.save(path)
        assert tsvc.Encoder.load(path) == enc
        data = os.path.join(tmp, "d.tsvd")
        splits.save(data)
        again = tsvc.Splits.load(data)
        assert again.train.clean_flags() == splits.train.clean_flags()
        try:
            tsvc.Encoder.from_bytes(enc.to_bytes()[:-1])
        except tsvc.FormatError:
            pass
        else:
            raise AssertionError("truncated checkpoint accepted")
    return result.final_rsum


if __name__ == "__main__":
    check_numerics()
    rsum = check_data_and_training()
    print(f"python smoke test ok (final val rsum {rsum:.1f})")
