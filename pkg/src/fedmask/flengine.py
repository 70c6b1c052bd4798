"""Toy federated workload: synthetic linear tasks, local SGD, plain FedAvg.

The model is a linear regressor under one-half mean-squared-error loss,
so the minibatch gradient is X^T(Xw - y)/batch.  This keeps the oracle
exact: the plaintext weighted average of local updates is what the
masked pipeline must reproduce up to fixed-point rounding.
"""

import csv
import random
from dataclasses import dataclass

import numpy as np

from fedmask.masking import ModelVector


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class SyntheticTask:
    true_weights: np.ndarray
    noise_std: float
    partition_sizes: tuple[int, ...]
    feature_seed: int


@dataclass(frozen=True)
class LocalTrainer:
    learning_rate: float = 0.1
    epochs: int = 3
    batch_size: int = 10


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # shape (n, d)
    targets: np.ndarray   # shape (n,)

    def __len__(self) -> int:
        return self.features.shape[0]


def partition_sizes(total_per_client: int, clients: int, law: str) -> tuple[int, ...]:
    if law == "iid":
        return (total_per_client,) * clients
    if law == "skewed":
        # sizes ramp linearly with client index, same total as the iid law
        total = total_per_client * clients
        ramp = np.arange(1, clients + 1, dtype=np.float64)
        sizes = np.maximum(1, np.rint(total * ramp / ramp.sum()).astype(int))
        sizes[-1] += total - sizes.sum()
        if sizes[-1] < 1:
            raise TrainingError("skewed partition left the last client empty")
        return tuple(int(s) for s in sizes)
    raise TrainingError(f"unknown partition law {law!r}")


def generate_task(
    seed: int,
    dim: int,
    clients: int,
    law: str = "iid",
    samples_per_client: int = 50,
    noise_std: float = 0.0,
) -> tuple[SyntheticTask, list[Dataset]]:
    if dim < 1 or clients < 1:
        raise TrainingError("need at least one dimension and one client")
    rng = np.random.default_rng(seed)
    true_weights = rng.uniform(-1.0, 1.0, size=dim)
    sizes = partition_sizes(samples_per_client, clients, law)
    datasets = []
    for n in sizes:
        x = rng.standard_normal((n, dim))
        noise = rng.standard_normal(n) * noise_std if noise_std > 0 else 0.0
        y = x @ true_weights + noise
        datasets.append(Dataset(features=x, targets=y))
    task = SyntheticTask(true_weights=true_weights, noise_std=noise_std,
                         partition_sizes=sizes, feature_seed=seed)
    return task, datasets


def local_train(
    model: np.ndarray, dataset: Dataset, trainer: LocalTrainer, seed: int = 0
) -> ModelVector:
    """Minibatch SGD from the given global model; n is the full local size."""
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if dataset.features.shape[1] != model.shape[0]:
        raise TrainingError(
            f"model dimension {model.shape[0]} does not match data "
            f"dimension {dataset.features.shape[1]}"
        )
    w = np.array(model, dtype=np.float64)
    n = len(dataset)
    order_rng = random.Random(seed)
    for _ in range(trainer.epochs):
        order = list(range(n))
        order_rng.shuffle(order)
        for start in range(0, n, trainer.batch_size):
            idx = order[start:start + trainer.batch_size]
            x = dataset.features[idx]
            y = dataset.targets[idx]
            grad = x.T @ (x @ w - y) / len(idx)
            w = w - trainer.learning_rate * grad
    return ModelVector(weights=w, n=n)


def plaintext_fedavg(updates: list[ModelVector]) -> np.ndarray:
    if not updates:
        raise TrainingError("cannot average an empty update list")
    total = sum(u.n for u in updates)
    if total == 0:
        raise TrainingError("total sample count is zero")
    acc = np.zeros_like(updates[0].weights, dtype=np.float64)
    for u in updates:
        acc += u.n * u.weights
    return acc / total


def export_dataset(path: str, dataset: Dataset) -> None:
    dim = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dim)] + ["y"])
        for row, target in zip(dataset.features, dataset.targets):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(target))])


def import_dataset(path: str) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "y":
            raise TrainingError(f"{path} does not look like an exported dataset")
        dim = len(header) - 1
        xs, ys = [], []
        for row in reader:
            if len(row) != dim + 1:
                raise TrainingError(f"row of {len(row)} fields in {path}")
            xs.append([float(v) for v in row[:dim]])
            ys.append(float(row[dim]))
    return Dataset(features=np.array(xs, dtype=np.float64),
                   targets=np.array(ys, dtype=np.float64))
