# 50-digit softmax reference used to freeze expected values in the Rust tests.
from mpmath import mp, mpf, exp

mp.dps = 50


def softmax(ds, tau):
    e = [exp(mpf(d) / mpf(tau)) for d in ds]
    s = sum(e)
    return [x / s for x in e]


if __name__ == "__main__":
    for v in softmax(["0.3", "0.1", "-0.2"], "0.01"):
        print(mp.nstr(v, 30))
