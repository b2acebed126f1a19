"""Scratch calibration: step timings, training curves, and tau at toy scale."""
import sys
import time

import numpy as np

from specdec import corpus as C
from specdec import engine as E
from specdec import model as M
from specdec import training as TR
from specdec import tokenizer as TK

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 100
draft_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 100

t0 = time.perf_counter()
docs = C.synthesize_documents(4000, seed=1234)
text = "\n".join(d.text for d in docs)
print(f"corpus: {len(text)/1e6:.2f} MB, {time.perf_counter()-t0:.1f}s")

t0 = time.perf_counter()
tok = TK.build_tokenizer(text, 512)
print(f"tokenizer: vocab {tok.vocab_size}, {time.perf_counter()-t0:.1f}s")

cfg = M.ModelConfig()  # toy defaults: vocab 512 hidden 128 inter 384 L4 H4
corpus = TR.TokenizedCorpus.build(docs, tok, cfg.max_seq_len, seed=0)
print(f"docs: train {len(corpus.train_docs)} eval {len(corpus.eval_docs)}, "
      f"stream {len(corpus.stream)} tokens")

tc = TR.TrainConfig(learning_rate=1e-3, steps=steps, draft_steps=draft_steps,
                    batch_size=16, seq_len=96, seed=0)
t0 = time.perf_counter()
target = TR.pretrain_target(corpus, tc, cfg, progress=print)
dt = time.perf_counter() - t0
print(f"pretrain: {dt:.1f}s total, {dt/steps*1000:.0f} ms/step")
print(f"eval loss {TR.eval_stream_loss(target, corpus.stream):.3f} vs uniform {TR.uniform_loss(cfg.vocab_size):.3f}")

tc_draft = TR.TrainConfig(learning_rate=1e-3, steps=steps, draft_steps=draft_steps,
                          batch_size=16, seq_len=96, seed=0)
t0 = time.perf_counter()
draft = TR.train_draft(target, corpus, tc_draft, variant="fspad", progress=print)
dt = time.perf_counter() - t0
print(f"draft train: {dt:.1f}s total, {dt/draft_steps*1000:.0f} ms/step")

acc = TR.eval_draft_accuracy(target, draft, corpus.eval_docs, top_k=(1, 3), max_docs=40)
print(f"draft eval acc: {acc}")

for label, (budget, k) in (("full", (60, 8)), ("halved", (30, 4))):
    drafter = E.ModelDrafter(draft, depth=5, expand_k=k, select_m=8, budget=budget)
    engine = E.SpeculativeEngine(target, drafter)
    taus = []
    t0 = time.perf_counter()
    for i, prompt in enumerate(C.task_prompts("continuation", 10, seed=7)):
        ids = tok.encode(prompt, add_bos=True)
        out, stats = engine.generate(ids, 48, temperature=0.0, eos_id=TK.EOS)
        taus.append(stats.tau())
    print(f"{label}: tau mean {np.mean(taus):.2f} taus {['%.2f'%t for t in taus]} "
          f"({time.perf_counter()-t0:.1f}s)")
