"""Scratch: longer training + all variants, previews ablation ordering."""
import time

import numpy as np

from specdec import corpus as C
from specdec import engine as E
from specdec import model as M
from specdec import training as TR
from specdec import tokenizer as TK

docs = C.synthesize_documents(4000, seed=1234)
text = "\n".join(d.text for d in docs)
tok = TK.build_tokenizer(text, 512)
cfg = M.ModelConfig()
corpus = TR.TokenizedCorpus.build(docs, tok, cfg.max_seq_len, seed=0)

tc = TR.TrainConfig(learning_rate=1e-3, steps=400, draft_steps=500,
                    batch_size=16, seq_len=96, seed=0)
t0 = time.perf_counter()
target = TR.pretrain_target(corpus, tc, cfg)
print(f"pretrain 300 steps: {time.perf_counter()-t0:.0f}s, "
      f"eval loss {TR.eval_stream_loss(target, corpus.stream):.3f}")

drafts = {}
for variant in M.VARIANTS:
    t0 = time.perf_counter()
    drafts[variant] = TR.train_draft(target, corpus, tc, variant=variant)
    acc = TR.eval_draft_accuracy(target, drafts[variant], corpus.eval_docs,
                                 top_k=(1,), max_docs=40)
    print(f"{variant}: {time.perf_counter()-t0:.0f}s, top1 {acc[1]:.3f}")

for task in C.TASKS:
    prompts = C.task_prompts(task, 8, seed=7)
    row = {}
    for variant, draft in drafts.items():
        drafter = E.ModelDrafter(draft, depth=5, expand_k=8, select_m=8, budget=60)
        engine = E.SpeculativeEngine(target, drafter)
        taus = []
        for prompt in prompts:
            ids = tok.encode(prompt, add_bos=True)
            out, stats = engine.generate(ids, 48, temperature=0.0, eos_id=TK.EOS)
            taus.append(stats.tau())
        row[variant] = float(np.mean(taus))
    print(task, {k: f"{v:.2f}" for k, v in row.items()})

# halved preset check for fspad
drafter = E.ModelDrafter(drafts["fspad"], depth=5, expand_k=4, select_m=8, budget=30)
engine = E.SpeculativeEngine(target, drafter)
taus = []
for prompt in C.task_prompts("continuation", 8, seed=7):
    ids = tok.encode(prompt, add_bos=True)
    out, stats = engine.generate(ids, 48, temperature=0.0, eos_id=TK.EOS)
    taus.append(stats.tau())
print(f"fspad halved continuation: {np.mean(taus):.2f}")
