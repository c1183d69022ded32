"""Builds the extension module and exercises it end to end.

    python3 python/smoke_test.py
"""

import json
import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build(dest: pathlib.Path) -> None:
    subprocess.run(
        ["cargo", "build", "--release", "-p", "cwvae-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libcwvae.so"
    shutil.copy(lib, dest / "cwvae.so")


def main() -> None:
    work = pathlib.Path(tempfile.mkdtemp())
    build(work)
    sys.path.insert(0, str(work))
    import cwvae

    assert cwvae.distinct_n([["go", "home"], ["go", "away"]], 1) == 0.75
    assert cwvae.distinct_n([["go", "home"], ["go", "away"]], 2) == 0.5
    msg = "to send a message".split()
    assert cwvae.sentence_bleu(msg, [msg, "express themself".split()]) == 1.0
    assert abs(cwvae.kl_diag_gauss([1.0], [1.0], [0.0], [1.0]) - 0.5) < 1e-12
    assert cwvae.tokenize("PersonX writes PersonY a letter.") == ["PersonX", "writes", "PersonY", "a", "letter", "."]

    # one-to-one toy task: event [a] -> target [a + 10]
    data = [([4 + i], [14 + i]) for i in range(10)]
    for kind in cwvae.MODEL_KINDS:
        m = cwvae.Model(kind, vocab_size=24, width=12, latent=4, seed=1)
        before = m.perplexity(data, k_samples=3)["ppl"]
        epochs = m.fit(data, dev=data, config=json.dumps({"max_epochs": 30, "batch_size": 10, "lr": 0.01}))
        after = m.perplexity(data, k_samples=3)["ppl"]
        assert after < before, (kind, before, after)
        gens = m.generate([4], k=3, seed=2)
        assert len(gens) == 3 and all(math.isfinite(g["log_prob"]) for g in gens)
        print(f"{kind:20s} ppl {before:7.2f} -> {after:6.2f} after {len(epochs)} epochs, first decode {gens[0]['tokens']}")

    m = cwvae.Model("cwvae", vocab_size=24, width=8, latent=4)
    ctx = [([4, 5], [6], [7, 8, 9])]
    terms = m.loss(ctx, stage="pretrain", lam=0.0)
    assert terms["kl_context_reg"] >= 0.0
    path = work / "m.ckpt"
    m.save(str(path))
    back = cwvae.Model.load(str(path))
    assert back.params_digest() == m.params_digest() and back.vocab == m.vocab
    report = back.evaluate([([4], [5]), ([4], [6])], config=json.dumps({"k": 4, "ppl_samples": 2}))
    assert len(report["events"]) == 1 and 0.0 <= report["aggregates"]["distinct2"] <= 1.0

    try:
        back.loss([([4], [5])], stage="pretrain")
    except cwvae.CwvaeError as e:
        print("contract error surfaced:", e)
    else:
        raise AssertionError("pretraining without context must fail")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
