"""Train a small coupled-attention classifier end to end, in-process.

Uses the built-in rendered-digit dataset (written in MNIST's IDX layout) so
the demo runs offline.  Point COUPLFORMER_DATA at a real MNIST directory to
train on the genuine files instead.  Expect a minute or two on one core.
"""

import os
import tempfile

from couplformer.model import CouplformerModel, ModelConfig, StemStage
from couplformer.train import (
    TrainConfig,
    evaluate,
    load_dataset,
    split_indices,
    subset_indices,
    train_loop,
    write_digit_idx,
)

data_dir = os.environ.get("COUPLFORMER_DATA")
if data_dir is None:
    data_dir = os.path.join(tempfile.gettempdir(), "couplformer-digits-2k")
    if not os.path.exists(os.path.join(data_dir, "train-images-idx3-ubyte")):
        print(f"rendering a digit dataset into {data_dir} ...")
        os.makedirs(data_dir, exist_ok=True)
        write_digit_idx(data_dir, n_train=2000, n_test=300, seed=0)

images, labels, _, _ = load_dataset(data_dir)
keep = subset_indices(len(labels), 2000, seed=0)
images, labels = images[keep], labels[keep]
train_idx, val_idx = split_indices(len(labels), val_size=200, seed=0)

model_cfg = ModelConfig(
    img_size=(28, 28),
    in_channels=1,
    conv_stem=(StemStage(16), StemStage(32)),
    embed_dim=32,
    depth=2,
    heads=4,
    num_classes=10,
)
model = CouplformerModel(model_cfg, seed=0)
print(f"{model.param_count()} parameters, token grid {model_cfg.token_grid()}")

train_cfg = TrainConfig(epochs=4, batch_size=8, lr=3e-3, seed=0, target_train_acc=0.9)
result = train_loop(
    model,
    images[train_idx],
    labels[train_idx],
    images[val_idx],
    labels[val_idx],
    train_cfg,
    log=print,
)
print(f"final train accuracy {result.final_train_acc:.3f}, val accuracy {result.final_val_acc:.3f}")

val_loss, val_acc = evaluate(model, images[val_idx], labels[val_idx])
print(f"re-evaluated val: loss {val_loss:.4f}, accuracy {val_acc:.3f}")
