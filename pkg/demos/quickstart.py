"""Train a small still-image embedding net on synthetic faces, then score retrieval and n-shot identification.

Runs in a few seconds on one CPU.
"""

import numpy as np

from facemetric import EmbeddingSet, TrainConfig, build, build_splits, generate_synthetic_identities, \
    nshot_eval, topn_retrieval_accuracy, train
from facemetric.evaluation import grid_search_C
from facemetric.nets.builders import embed

store, manifest = generate_synthetic_identities(num_ids=20, clips_per_id=4, frames_per_clip=12, seed=0)
splits = build_splits(store, "stills", seed=0)
net = build("inception_lite", splits.train.x.shape[1:], seed=0)

history = train(net, splits, TrainConfig(loss="contrastive", margin=1.0, epochs=5, batches_per_epoch=6, seed=0))
print("validation top-1 per epoch:", [round(v, 3) for v in history.val_top1])

test = splits.test
emb = EmbeddingSet(embed(net, test.x), test.labels, test.ids)
print("test retrieval:", topn_retrieval_accuracy(emb, (1, 3, 5)).accuracy)

# the SVM's C matters a lot for these short, unnormalised embeddings
c, scores = grid_search_C(emb, (0.001, 0.01, 0.1, 1.0, 10.0), folds=3, rng=np.random.default_rng(0))
print("cross-validated C:", c)
for n in (1, 3, 5):
    print(f"{n}-shot SVM accuracy:", round(nshot_eval(emb, n, c, np.random.default_rng(n)).accuracy, 3))
