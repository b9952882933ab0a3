import gzip, struct, numpy as np, os, sklearn
p = os.path.join(os.path.dirname(sklearn.__file__), 'datasets/data/digits.csv.gz')
a = np.loadtxt(gzip.open(p), delimiter=',')
x = a[:, :64]; y = a[:, 64].astype(np.uint8)
img = np.rint(x * 255.0 / 16.0).astype(np.uint8).reshape(-1, 8, 8)
rng = np.random.RandomState(20210701)
train, test = [], []
for c in range(10):
    idx = np.where(y == c)[0]; rng.shuffle(idx)
    k = int(round(len(idx) * 0.2)); test += list(idx[:k]); train += list(idx[k:])
train = np.array(sorted(train)); test = np.array(sorted(test))
rng.shuffle(train); rng.shuffle(test)
out = 'crates/core/data/digits'
for name, ids in (('train', train), ('test', test)):
    with open(f'{out}/{name}-images-idx3-ubyte', 'wb') as f:
        f.write(struct.pack('>IIII', 0x803, len(ids), 8, 8)); f.write(img[ids].tobytes())
    with open(f'{out}/{name}-labels-idx1-ubyte', 'wb') as f:
        f.write(struct.pack('>II', 0x801, len(ids))); f.write(y[ids].tobytes())
    print(name, len(ids), np.bincount(y[ids]))
