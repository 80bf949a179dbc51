"""Print the inference latency estimate over a grid of widths and layer counts."""

from graphfetch.sim import LatencyConfig, estimate_latency, latency_table

DIMS = (8, 16, 32, 64, 128, 256, 512, 1024)
LAYERS = (1, 2, 3, 4)

if __name__ == "__main__":
    print(f"reference config: {estimate_latency(LatencyConfig())} cycles")
    print("layers " + "".join(f"{d:>7}" for d in DIMS))
    for layers, row in zip(LAYERS, latency_table(DIMS, LAYERS)):
        print(f"{layers:<6} " + "".join(f"{v:>7}" for v in row))
