"""Parent-to-child initialisation on a toy pair of vocabularies.

Run:  python3 demos/02_transfer.py
"""
import numpy as np

from deskmt.corpus import gen_synthetic, SyntheticLanguageSpec
from deskmt.model import ModelConfig, new_checkpoint
from deskmt.subword import Codec
from deskmt.transfer import tl_init, tm_init

spec = SyntheticLanguageSpec(base_vocab=40, min_len=3, max_len=7)
parent_data = gen_synthetic(spec, 400, 0, "P")
child_data = gen_synthetic(spec, 80, 1, "C")
print("parent pair :", parent_data.src[0], "->", parent_data.tgt[0])
print("child pair  :", child_data.src[0], "->", child_data.tgt[0])

p_src = Codec.train(parent_data.src, 30, "source")
c_src = Codec.train(child_data.src, 30, "source")
tgt = Codec.train(parent_data.tgt, 30, "target")
shape = dict(layers=1, model_dim=16, ffn_dim=32, heads=2, max_positions=32)
parent = new_checkpoint(ModelConfig(len(p_src.vocab), len(tgt.vocab), **shape), 0,
                        p_src.vocab.fingerprint(), tgt.vocab.fingerprint())
child_cfg = ModelConfig(len(c_src.vocab), len(tgt.vocab), **shape)

_, tl = tl_init(parent, child_cfg, (c_src.vocab, tgt.vocab), 1)
tm, rep = tm_init(parent, child_cfg, (c_src.vocab, tgt.vocab), 1, p_src.vocab)
print(f"\nTL: {tl.matched} source rows copied, {tl.randomly_initialized} drawn at random")
print(f"TM: {rep.matched} source rows copied, {rep.randomly_initialized} drawn at random")
print("a few shared subwords:", sorted(rep.matched_tokens)[:8])

tok = sorted(rep.matched_tokens)[0]
same = np.array_equal(tm.params["src_embed"][c_src.vocab.id(tok)], parent.params["src_embed"][p_src.vocab.id(tok)])
print(f"row of {tok!r} identical to the parent row: {same}")
body = all(np.array_equal(tm.params[k], v) for k, v in parent.params.items() if k != "src_embed")
print(f"every other parameter copied as is: {body}")
