"""End-to-end smoke tests for the _kgmod extension module.

Usage: smoke.py <dir-containing-_kgmod> <repo-root>
"""

import hashlib
import math
import sys
import tempfile


def main() -> int:
    module_dir, repo_root = sys.argv[1], sys.argv[2]
    sys.path.insert(0, module_dir)
    import _kgmod as kg

    # corpus: parse + annotate the checked-in fixture to the exact record
    fixtures = repo_root + "/data/fixtures"
    index = kg.TitleIndex.load(fixtures + "/patent.titles.tsv")
    with open(fixtures + "/patent-abstract.wiki", "rb") as f:
        source = f.read().decode()
    doc, warnings, dropped = kg.annotate("patent-abstract", source, index)
    assert not warnings and dropped == 2
    assert [m.qid for m in doc.mentions] == ["Q3039740", "Q1459541"]
    assert doc.mentions[0].spans == [(213, 237), (263, 287)]
    assert doc.mentions[1].spans == [(346, 387)]
    with open(fixtures + "/patent.expected.jsonl", "rb") as f:
        assert (doc.to_json() + "\n").encode() == f.read()

    stats = kg.corpus_stats([doc])
    assert stats["num_texts"] == 1 and stats["entities_min"] == 2

    # transe: train on a tiny synthetic kg, rank, export, query neighbors
    store = kg.make_synthetic_kg(entities=20, relations=5, family="capital_mix", seed=1)
    train, test = kg.split_triples(store, test_fraction=0.2, seed=42)
    model, trace = kg.train_transe(train, dim=16, epochs=150, lr=0.1, seed=42)
    assert trace[-1] < trace[0]
    metrics = kg.link_prediction(model, store, test)
    assert 0.0 <= metrics["hits_at_10"] <= 1.0
    table = kg.export_table(model)
    assert len(table) == 20 and table.dim == 16
    qid = model.entities[0]
    assert kg.EntityEmbeddingTable is type(table)
    top = table.nearest(table.get(qid), k=1)
    assert top[0][0] == qid and top[0][1] < 1e-12

    # mapper: deterministic encoding and chunked inference
    mapper = kg.Mapper(kg_dim=16, buckets=256, hidden=16, seed=7)
    a = mapper.encode(["quell", "north", "river"])
    b = mapper.encode(["river", "quell", "north"])
    assert a == b  # bag-of-words order insensitivity
    chunks = kg.map_text(mapper, " ".join(f"w{i}" for i in range(100)), context_len=30)
    assert len(chunks) == math.ceil(100 / 30)

    spans, skipped = kg.extract_spans(doc, table, window=20)
    assert spans == [] and skipped == 2  # fixture qids are not in this toy table

    # toy lm + adapter: pretrain, freeze, inject, generate
    texts = ["red fox jumps", "blue fox sleeps", "red owl sings", "blue owl rests"]
    lm, (train_loss, val_loss) = kg.pretrain_toy_lm(
        texts, d_model=16, blocks=2, heads=2, context=32, vocab_max=32, epochs=3,
        batch=2, seed=42)
    assert lm.frozen and len(train_loss) == 3
    lm2, _ = kg.pretrain_toy_lm(
        texts, d_model=16, blocks=2, heads=2, context=32, vocab_max=32, epochs=3,
        batch=2, seed=42)
    assert lm.params_sha256() == lm2.params_sha256()  # seeded determinism

    adapter = kg.AdapterModel(kg_dim=16, d_model=16, seed=3)
    shape = kg.inject(lm, adapter, [[0.1] * 16, [0.2] * 16], lm.encode("red fox"))
    assert shape["rows"] == len(lm.encode("red fox")) + 4 and shape["kg_end"] == 4

    out_plain = kg.generate(lm, None, [], "red fox", max_new=4, mode="plain")
    assert out_plain == kg.generate(lm, None, [], "red fox", max_new=4, mode="plain")
    out_kg = kg.generate(lm, adapter, [[0.1] * 16], "red fox", max_new=4, mode="with_kg")
    assert isinstance(out_kg, str)

    ex = kg.make_adapter_example(doc, table, max_kg=16)
    assert ex.gold == []  # fixture entities are absent from the toy table

    # eval harness: pinned prompts and a python model callback
    preamble = kg.prompt_preamble("truefalse_8shot")
    assert hashlib.sha256(preamble.encode()).hexdigest() == kg.TRUEFALSE_PREAMBLE_SHA256
    prompt = kg.build_prompt("truefalse_8shot", "Blood are red.")
    assert "Statement: Dracula is a written work." in prompt
    assert prompt.endswith("Your Judgement:")
    assert kg.parse_verdict('sure: "True"', "truefalse_8shot") == "positive"
    assert kg.parse_verdict("REFUTES it", "fever_8shot") == "negative"
    assert kg.parse_verdict("hmm", "truefalse_8shot") == "unparsable"

    items = [(f"statement {i}", i % 2 == 0, "Cities") for i in range(10)]

    def oracle(prompt: str, kg_vecs) -> str:
        for statement, gold, _ in items:
            if f"Statement: {statement}\n" in prompt:
                return '"True"' if gold else '"False"'
        return "missing"

    report = kg.judge(oracle, items, "truefalse_8shot")
    assert report["average"] == 1.0 and report["mode"] == "plain"

    calls = []
    report_kg = kg.judge(
        lambda p, v: '"True"' if v else '"False"',
        items,
        "truefalse_8shot",
        kg_provider=lambda s: (calls.append(s), [[1.0, 2.0]])[1],
    )
    assert report_kg["mode"] == "with_kg" and len(calls) == 10
    assert report_kg["kg_vectors_used"] == 10

    # cli entry point through the binding
    with tempfile.TemporaryDirectory() as tmp:
        code, out, err = kg.cli_run([
            "annotate", "--input", fixtures + "/patent-abstract.wiki", "--titles",
            fixtures + "/patent.titles.tsv", "--out-dir", tmp,
        ])
        assert code == 0, err
        code, _, err = kg.cli_run(["no-such-command"])
        assert code == 2

    print("python smoke: all checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
