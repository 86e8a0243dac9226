#pragma once

// Offline trajectory database: (lagged feature window -> update) pairs with
// per-stream scale factors. Records hold raw (unscaled) values; fitting runs
// on a dense unit-variance view built via ScaledDb.
//
// On disk: JSON-lines, one record per line
//   {"task": int, "t": int, "coord": int, "streams": {"g": [T floats], ...},
//    "out": float}
// with a sidecar <name>.meta.json carrying horizon, stream order, scales and
// the fingerprint.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "symdistill/expr.hpp"

namespace symdistill {

struct DbRecord {
  int32_t task = 0;
  int32_t t = 0;
  int32_t coord = 0;
  std::vector<std::vector<double>> streams;  // parallel to TrajectoryDB::streams
  double out = 0.0;
};

struct TrajectoryDB {
  int horizon = 0;  // T; every stream vector has exactly this length
  std::vector<std::string> streams;
  std::vector<DbRecord> records;
  std::vector<double> scales;  // per-stream std; parallel to streams
  double out_scale = 1.0;
  std::string source_id;

  size_t size() const { return records.size(); }

  // Population standard deviations over all records and lags. Degenerate
  // (near-constant) streams get scale 1.
  void compute_scales();

  FeatureWindow raw_window(size_t record) const;
  FeatureWindow scaled_window(size_t record) const;

  uint64_t fingerprint() const;

  std::string to_jsonl() const;
  void save(const std::string& jsonl_path) const;
  static TrajectoryDB load(const std::string& jsonl_path);
};

// Dense scaled matrices for the fitting hot path.
struct ScaledDb {
  int horizon = 0;
  std::vector<std::string> streams;
  size_t n = 0;
  std::vector<std::vector<double>> x;  // per stream: n * horizon, row-major
  std::vector<double> y;               // scaled outputs

  static ScaledDb from(const TrajectoryDB& db);

  double value(size_t stream, size_t record, int lag) const {
    return x[stream][record * static_cast<size_t>(horizon) +
                     static_cast<size_t>(lag)];
  }
};

// Maps expression stream indices to ScaledDb stream indices.
// Throws MissingInputError if the expression references an unknown stream.
std::vector<int> bind_streams(const Expression& e, const ScaledDb& db);

}  // namespace symdistill
