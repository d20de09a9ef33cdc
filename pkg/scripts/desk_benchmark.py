"""Train the four desk-scale models and run the ordering, series-length,
date-conditioning and cloud-attention studies. Results go to a JSON file."""

import argparse
import json
import logging
import time

from sitsr.experiments import (
    DeskConfig,
    DeskData,
    cloud_attention,
    clouded_samples,
    date_correlation,
    ordering_experiment,
    series_length_sweep,
    trained_model,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=DeskConfig.steps)
    ap.add_argument("--out", default="desk_results.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = DeskConfig(steps=args.steps)
    t0 = time.time()
    data = DeskData(cfg)
    results = {"ordering": ordering_experiment(cfg, data=data)}
    ltae = trained_model("highresnet_ltae", cfg, data)
    test = data.samples("test")
    results["series_length"] = series_length_sweep(ltae, test)
    results["date_correlation"] = date_correlation(ltae, test[:100])
    results["cloud_attention"] = cloud_attention(ltae, clouded_samples(cfg, 100))
    results["seconds"] = time.time() - t0
    text = json.dumps(results, indent=2)
    print(text)
    with open(args.out, "w") as f:
        f.write(text)


if __name__ == "__main__":
    main()
