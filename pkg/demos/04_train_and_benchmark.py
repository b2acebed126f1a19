"""End-to-end mini pipeline: corpus -> tokenizer -> target -> draft -> bench.

A scaled-down version of what `specdec train-target`, `train-draft`, and
`bench` do; takes a couple of minutes on one core.

Run from the repository root:  python3 demos/04_train_and_benchmark.py
"""

import numpy as np

from specdec import bench as B
from specdec import corpus as C
from specdec import engine as E
from specdec import model as M
from specdec import tokenizer as TK
from specdec import training as TR

# --- data and tokenizer -----------------------------------------------------

docs = C.synthesize_documents(1500, seed=1234)
text = "\n".join(d.text for d in docs)
print(f"corpus: {len(docs)} documents, {len(text) / 1e6:.2f} MB")
print("sample:", docs[0].text[:90], "...\n")

tok = TK.build_tokenizer(text, 512)
print(f"tokenizer vocab: {tok.vocab_size}")

cfg = M.ModelConfig(vocab_size=tok.vocab_size, hidden_size=64, intermediate_size=192,
                    n_layers=3, n_heads=4, max_seq_len=256)
corpus = TR.TokenizedCorpus.build(docs, tok, cfg.max_seq_len, seed=0)

# --- train the target, then distill the draft -------------------------------

tc = TR.TrainConfig(learning_rate=1e-3, steps=150, draft_steps=200,
                    batch_size=8, seq_len=64, seed=0)
target = TR.pretrain_target(corpus, tc, cfg,
                            progress=lambda m: print("  " + m) if "0/" in m else None)
print(f"eval loss {TR.eval_stream_loss(target, corpus.stream, seq_len=64):.2f} "
      f"(uniform {TR.uniform_loss(cfg.vocab_size):.2f})")

draft = TR.train_draft(target, corpus, tc, variant="fspad",
                       progress=lambda m: print("  " + m) if "0/" in m else None)
acc = TR.eval_draft_accuracy(target, draft, corpus.eval_docs, top_k=(1, 5), max_docs=40)
print(f"draft agreement with target: top-1 {acc[1]:.2f}, top-5 {acc[5]:.2f}\n")

# --- generate ----------------------------------------------------------------

engine = E.SpeculativeEngine(target, E.ModelDrafter(draft, depth=5, expand_k=8,
                                                    select_m=8, budget=60))
prompt = C.task_prompts("continuation", 1, seed=7)[0]
ids = tok.encode(prompt, add_bos=True)
out, stats = engine.generate(ids, 40, temperature=0.0, eos_id=TK.EOS)
print("prompt:      ", prompt)
print("continuation:", tok.decode(out))
print(f"tau {stats.tau():.2f}, accepted per step {stats.accepted_lengths}\n")

# --- benchmark one task ------------------------------------------------------

report = B.bench_cell(target, draft, tok, "continuation", 0.0,
                      B.DraftingConfig(), B.BenchConfig(prompts_per_task=5, max_new=32),
                      seed=11)
print(f"bench: tau {report.tau:.2f}, speedup {report.speedup:.2f}x over "
      f"{report.prompts_run} prompts ({report.tokens_emitted} tokens, "
      f"{report.target_passes} target passes)")
