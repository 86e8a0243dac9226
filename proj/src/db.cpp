#include "symdistill/db.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace symdistill {

void TrajectoryDB::compute_scales() {
  scales.assign(streams.size(), 1.0);
  for (size_t s = 0; s < streams.size(); ++s) {
    double sum = 0.0, sum2 = 0.0;
    size_t count = 0;
    for (const auto& r : records) {
      for (double v : r.streams[s]) {
        sum += v;
        sum2 += v * v;
        ++count;
      }
    }
    if (count == 0) continue;
    const double mean = sum / static_cast<double>(count);
    const double var = sum2 / static_cast<double>(count) - mean * mean;
    const double sd = std::sqrt(std::max(var, 0.0));
    scales[s] = sd > 1e-12 ? sd : 1.0;
  }
  double sum = 0.0, sum2 = 0.0;
  for (const auto& r : records) {
    sum += r.out;
    sum2 += r.out * r.out;
  }
  if (!records.empty()) {
    const double n = static_cast<double>(records.size());
    const double mean = sum / n;
    const double sd = std::sqrt(std::max(sum2 / n - mean * mean, 0.0));
    out_scale = sd > 1e-12 ? sd : 1.0;
  }
}

FeatureWindow TrajectoryDB::raw_window(size_t record) const {
  FeatureWindow w;
  const auto& r = records[record];
  for (size_t s = 0; s < streams.size(); ++s) w.set(streams[s], r.streams[s]);
  return w;
}

FeatureWindow TrajectoryDB::scaled_window(size_t record) const {
  FeatureWindow w;
  const auto& r = records[record];
  for (size_t s = 0; s < streams.size(); ++s) {
    std::vector<double> v = r.streams[s];
    for (double& x : v) x /= scales[s];
    w.set(streams[s], std::move(v));
  }
  return w;
}

std::string TrajectoryDB::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json line;
    line["task"] = r.task;
    line["t"] = r.t;
    line["coord"] = r.coord;
    nlohmann::ordered_json s;
    for (size_t i = 0; i < streams.size(); ++i) s[streams[i]] = r.streams[i];
    line["streams"] = std::move(s);
    line["out"] = r.out;
    out += line.dump();
    out += '\n';
  }
  return out;
}

uint64_t TrajectoryDB::fingerprint() const {
  // FNV-1a over the serialized records.
  const std::string text = to_jsonl();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::string meta_path_for(const std::string& jsonl_path) {
  return jsonl_path + ".meta.json";
}

}  // namespace

void TrajectoryDB::save(const std::string& jsonl_path) const {
  {
    std::ofstream f(jsonl_path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + jsonl_path);
    f << to_jsonl();
  }
  nlohmann::ordered_json meta;
  meta["horizon"] = horizon;
  meta["streams"] = streams;
  nlohmann::ordered_json sc;
  for (size_t i = 0; i < streams.size(); ++i) sc[streams[i]] = scales[i];
  meta["scales"] = std::move(sc);
  meta["out_scale"] = out_scale;
  meta["source_id"] = source_id;
  meta["records"] = records.size();
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fingerprint()));
  meta["fingerprint"] = buf;
  std::ofstream f(meta_path_for(jsonl_path), std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + meta_path_for(jsonl_path));
  f << meta.dump(2) << '\n';
}

TrajectoryDB TrajectoryDB::load(const std::string& jsonl_path) {
  TrajectoryDB db;
  std::ifstream meta_f(meta_path_for(jsonl_path), std::ios::binary);
  if (!meta_f) {
    throw std::runtime_error("missing db metadata " +
                             meta_path_for(jsonl_path));
  }
  nlohmann::ordered_json meta;
  meta_f >> meta;
  db.horizon = meta.at("horizon").get<int>();
  db.streams = meta.at("streams").get<std::vector<std::string>>();
  db.scales.clear();
  for (const auto& s : db.streams) {
    db.scales.push_back(meta.at("scales").at(s).get<double>());
  }
  db.out_scale = meta.at("out_scale").get<double>();
  db.source_id = meta.value("source_id", std::string());

  std::ifstream f(jsonl_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + jsonl_path);
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::ordered_json::parse(line);
    DbRecord r;
    r.task = j.at("task").get<int32_t>();
    r.t = j.at("t").get<int32_t>();
    r.coord = j.value("coord", 0);
    r.out = j.at("out").get<double>();
    r.streams.resize(db.streams.size());
    for (size_t s = 0; s < db.streams.size(); ++s) {
      r.streams[s] = j.at("streams").at(db.streams[s]).get<std::vector<double>>();
      if (r.streams[s].size() != static_cast<size_t>(db.horizon)) {
        throw std::runtime_error("record window length != horizon");
      }
    }
    db.records.push_back(std::move(r));
  }
  return db;
}

ScaledDb ScaledDb::from(const TrajectoryDB& db) {
  if (db.scales.size() != db.streams.size()) {
    throw std::invalid_argument("db scales not computed");
  }
  ScaledDb s;
  s.horizon = db.horizon;
  s.streams = db.streams;
  s.n = db.records.size();
  const size_t T = static_cast<size_t>(db.horizon);
  s.x.assign(db.streams.size(), std::vector<double>(s.n * T));
  s.y.resize(s.n);
  for (size_t i = 0; i < s.n; ++i) {
    const auto& r = db.records[i];
    for (size_t st = 0; st < db.streams.size(); ++st) {
      const double inv = 1.0 / db.scales[st];
      for (size_t lag = 0; lag < T; ++lag) {
        s.x[st][i * T + lag] = r.streams[st][lag] * inv;
      }
    }
    s.y[i] = r.out / db.out_scale;
  }
  return s;
}

std::vector<int> bind_streams(const Expression& e, const ScaledDb& db) {
  std::vector<int> bind(e.streams().size(), -1);
  for (size_t i = 0; i < e.streams().size(); ++i) {
    for (size_t j = 0; j < db.streams.size(); ++j) {
      if (db.streams[j] == e.streams()[i]) {
        bind[i] = static_cast<int>(j);
        break;
      }
    }
    if (bind[i] < 0) {
      throw MissingInputError("database has no stream '" + e.streams()[i] +
                              "'");
    }
  }
  return bind;
}

}  // namespace symdistill
