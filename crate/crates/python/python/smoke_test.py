"""Smoke test for the styleforge Python extension.

Build first with `cargo build --release -p styleforge-py`; the test copies
target/release/libstyleforge_py.so next to itself as an importable module
(override the path with STYLEFORGE_PY_LIB).
"""

import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[3]


def load_module(tmp):
    lib = Path(os.environ.get("STYLEFORGE_PY_LIB", ROOT / "target" / "release" / "libstyleforge_py.so"))
    if not lib.exists():
        sys.exit(f"missing {lib}; run `cargo build --release -p styleforge-py`")
    shutil.copy(lib, Path(tmp) / "styleforge_py.so")
    sys.path.insert(0, tmp)
    import styleforge_py

    return styleforge_py


def main():
    with tempfile.TemporaryDirectory() as tmp:
        sf = load_module(tmp)

        pairs, pool_s, pool_t = sf.synth_corpus(5, 40, 20)
        assert len(pairs) == 40 and len(pool_s) == 20 and len(pool_t) == 20
        informal, formal = pairs[0]
        assert sf.informalize(formal) == informal
        assert sf.formalize(informal) == formal

        corpus = [s for p in pairs for s in p] + pool_s + pool_t
        table = sf.MergeTable.train(corpus, 200)
        ids = table.encode(formal)
        assert table.decode(ids) == formal
        again = sf.MergeTable.from_text(table.to_text())
        assert again.hash() == table.hash() and again.vocab_size == table.vocab_size

        assert abs(sf.corpus_bleu([formal], [formal]) - 100.0) < 1e-9
        assert abs(sf.g_score(86.2, 14.1) - 34.9) < 0.05
        report = json.loads(sf.eval_report(40.0, accuracy=90.0, n_sentences=3))
        assert abs(report["g_score"] - 60.0) < 1e-9

        h = sf.config_hash("total_epochs = 3\npretrain_epochs = 1\n")
        assert len(h) == 64
        try:
            sf.config_hash("pretrain_epochs = 40\n")
        except ValueError:
            pass
        else:
            raise AssertionError("bad config accepted")

        # a tiny supervised run through the command line, then load the model
        d = Path(tmp)
        data = d / "data"
        assert sf.run_cli(["synth", "--out", str(data), "--train", "40", "--valid", "6", "--test", "6", "--unlabeled", "10", "--heldout", "10"]) == 0
        table_path = data / "table.bpe"
        assert sf.run_cli(["bpe-train", "--input", str(data / "train.src"), str(data / "train.tgt"), "--vocab-size", "150", "--out", str(table_path)]) == 0
        (d / "run.kv").write_text(
            "mode = supervised_only\nvariant = none\ntotal_epochs = 2\npretrain_epochs = 1\n"
            "max_tokens_per_batch = 96\nlearning_rate = 1e-3\nwarmup_updates = 2\n"
            "model.enc_layers = 1\nmodel.dec_layers = 1\nmodel.embed_dim = 16\nmodel.ffn_dim = 32\n"
            "model.n_heads = 2\nmodel.max_positions = 40\nmax_len = 38\n"
            f"data.merges = {table_path}\ndata.train_src = {data / 'train.src'}\n"
            f"data.train_tgt = {data / 'train.tgt'}\ndata.valid_src = {data / 'valid.src'}\n"
            f"data.valid_tgt = {data / 'valid.tgt'}\ndata.out_dir = {d / 'run'}\n"
        )
        assert sf.run_cli(["train", "--config", str(d / "run.kv")]) == 0
        assert sf.run_cli(["no-such-command"]) == 1

        model = sf.Model.load(str(d / "run" / "best.ckpt"))
        table = sf.MergeTable.load(str(table_path))
        src = (data / "test.src").read_text().splitlines()[0]
        x = table.encode(src)
        y = model.generate(x, "t", beam=2)
        assert all(isinstance(t, int) for t in y)
        assert model.log_prob(x, y, "t") <= 0.0
        ppl = model.perplexity([(x, table.encode((data / "test.tgt").read_text().splitlines()[0]))])
        assert ppl >= 1.0
        assert model.n_params > 0
    print("python smoke test passed")


if __name__ == "__main__":
    main()
