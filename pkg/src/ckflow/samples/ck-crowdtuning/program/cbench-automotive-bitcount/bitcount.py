"""Bit counting kernel (stand-in for cBench bitcount)."""
import json
import sys

n = int(sys.argv[1])
total = sum(bin(i).count("1") for i in range(n))
with open("output.txt", "w") as fh:
    fh.write(f"{total}\n")
with open("tmp-ck-output.json", "w") as fh:
    json.dump({"bits": total, "iterations": n}, fh)
print(total)
