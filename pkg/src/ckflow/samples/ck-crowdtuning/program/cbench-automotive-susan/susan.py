"""Small corner/edge detector over a synthetic image (stand-in for cBench susan)."""
import json
import os
import sys

mode = sys.argv[1]
block = int(sys.argv[2]) if len(sys.argv) > 2 else 1
N = 96


def pixel(x, y):
    inside = (20 <= x < 60 and 20 <= y < 60) or (50 <= x < 85 and 45 <= y < 80)
    return 200 if inside else 30


img = [[pixel(x, y) for x in range(N)] for y in range(N)]
count = 0
# block size only changes traversal order, never the result
for by in range(1, N - 1, block):
    for y in range(by, min(by + block, N - 1)):
        for x in range(1, N - 1):
            c = img[y][x]
            similar = sum(1 for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                          if abs(img[y + dy][x + dx] - c) < 27)
            if mode == "corners" and similar <= 4:
                count += 1
            elif mode == "edges" and 4 < similar <= 6:
                count += 1

with open("output.txt", "w") as fh:
    fh.write(f"{mode} {count}\n")
threads = int(os.environ.get("OMP_NUM_THREADS", "1"))
with open("tmp-ck-output.json", "w") as fh:
    json.dump({mode: count, "omp_num_threads": threads, "pixels": N * N}, fh)
print(f"{mode}: {count}")
