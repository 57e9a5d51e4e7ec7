"""Special token ids, fixed at the bottom of every vocabulary."""

PAD = 0
CLS = 1
SEP = 2
MASK = 3
EOS = 4
UNK = 5

SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[EOS]", "[UNK]")
N_SPECIALS = len(SPECIALS)
