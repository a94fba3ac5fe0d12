"""Rebuild the bundled Iowa county fixture.

Source: the 2016 Census cartographic boundary file (1:500k) shipped in the
``plotly-geo`` wheel (``cb_2016_us_county_500k``). Requires ``pyshp`` and
``shapely``, neither of which the package itself depends on.

    python scripts/build_iowa_fixture.py path/to/cb_2016_us_county_500k

Writes ``iowa_counties.geojson``, ``iowa_counties.csv`` and
``iowa_adjacency.txt`` into ``src/beltfield/data``. Adjacency here comes from
shapely (``intersects`` on the exact geometries), which keeps it independent of
``beltfield.graph.queen_contiguity``; the test suite checks the two agree.
"""
import csv
import json
import sys
from pathlib import Path

import shapefile
from shapely.geometry import shape

IOWA_FIPS = "19"
OUT = Path(__file__).resolve().parents[1] / "src" / "beltfield" / "data"


def main(stem):
    reader = shapefile.Reader(stem)
    rows = []
    for sr in reader.iterShapeRecords():
        if sr.record["STATEFP"] != IOWA_FIPS:
            continue
        geom = sr.shape.__geo_interface__
        # round identically on both sides of every shared edge
        def rnd(ring):
            return [[round(x, 6), round(y, 6)] for x, y in ring]
        if geom["type"] == "Polygon":
            coords = [rnd(r) for r in geom["coordinates"]]
        else:
            coords = [[rnd(r) for r in poly] for poly in geom["coordinates"]]
        rows.append((sr.record["GEOID"], sr.record["NAME"], geom["type"], coords))
    rows.sort(key=lambda r: r[0])
    assert len(rows) == 99, len(rows)

    features = []
    shapes = []
    for geoid, name, gtype, coords in rows:
        g = {"type": gtype, "coordinates": coords}
        features.append({"type": "Feature",
                         "properties": {"region_id": geoid, "name": name},
                         "geometry": g})
        shapes.append(shape(g))
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "iowa_counties.geojson", "w") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh,
                  separators=(",", ":"))

    with open(OUT / "iowa_counties.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "region_id", "name", "lon", "lat"])
        for k, ((geoid, name, _, _), s) in enumerate(zip(rows, shapes)):
            c = s.centroid
            w.writerow([k, geoid, name, f"{c.x:.6f}", f"{c.y:.6f}"])

    pairs = []
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            if shapes[i].intersects(shapes[j]):
                pairs.append((i, j))
    with open(OUT / "iowa_adjacency.txt", "w") as fh:
        fh.write("# Iowa counties, queen contiguity, 0-based indices in FIPS order\n")
        fh.write("# source: 2016 Census cartographic boundaries (cb_2016_us_county_500k)\n")
        fh.write(f"# n_regions = {len(shapes)}\n")
        for i, j in pairs:
            fh.write(f"{i} {j}\n")
    print(f"{len(shapes)} counties, {len(pairs)} adjacent pairs")


if __name__ == "__main__":
    main(sys.argv[1])
