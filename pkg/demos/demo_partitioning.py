"""How the three partitioning strategies shape client data.

Generates a small synthetic classification set, partitions it three ways,
and prints the label mix of a few shards from each. The sorted-label
strategy concentrates each shard on one or two classes (pathological
non-IID), per-user sampling gives uneven shard sizes, and iid splits stay
balanced.
"""

import numpy as np

from serverless_fl import data


def label_histogram(partition, classes):
    counts = np.bincount(partition.train.labels, minlength=classes)
    return " ".join(f"{c:4d}" for c in counts)


def main():
    classes = 5
    ds = data.synthetic_classification(3000, d=8, classes=classes, seed=0,
                                       cluster_seed=7)

    print("sorted-label shards (each sees at most two classes):")
    for p in data.partition_sorted_label(ds, 10)[:5]:
        print(f"  {p.shard_id}: {label_histogram(p, classes)}")

    print("\niid shards (balanced label mix):")
    for p in data.partition_iid(ds, 10, seed=1)[:5]:
        print(f"  {p.shard_id}: {label_histogram(p, classes)}")

    rng = np.random.default_rng(2)
    sizes = np.maximum(2, rng.lognormal(np.log(280), 0.5, size=10).astype(int))
    while sizes.sum() > len(ds):
        sizes[sizes.argmax()] -= 1
    print("\nper-user shards (lognormal sizes around 280):")
    for p in data.partition_per_user(ds, sizes.tolist(), seed=2)[:5]:
        print(f"  {p.shard_id}: {p.cardinality} examples")

    p = data.split_train_test(data.partition_sorted_label(ds, 10)[0], 0.1, seed=0)
    print(f"\nafter a 10% holdout split: {p.cardinality} train / "
          f"{p.test_cardinality} test examples per shard")


if __name__ == "__main__":
    main()
