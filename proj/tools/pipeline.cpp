#include "pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <numbers>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "umic/rng.hpp"

namespace umic::cli {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr std::size_t kDecimation = kDefaultDecimation;
constexpr double kFigureHalfWindow = 0.004;    // seconds either side of the chirp peak
constexpr double kFigureCorrWindow = 0.25;     // reference span correlated for the figure
constexpr std::int64_t kFigureHalfLag = 64;    // samples either side of the shift

// Seed streams.
constexpr std::uint64_t kStreamSchedule = 0x5c;
constexpr std::uint64_t kStreamAcoustic = 0xac;
constexpr std::uint64_t kStreamOptical = 0x1000;

// ---------------------------------------------------------------------------
// config validation

std::string child(const std::string& path, const std::string& key) { return path + "/" + key; }
std::string child(const std::string& path, std::size_t i) { return path + "/" + std::to_string(i); }
std::string shown(const std::string& path) { return path.empty() ? "/" : path; }

[[noreturn]] void fail(const std::string& path, const std::string& msg) { throw SchemaError(shown(path), msg); }

void expect_object(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) fail(path, "expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
      fail(child(path, k), "unknown key");
  }
}

double number(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) fail(path, "must be finite");
  return v;
}

double positive(const json& j, const std::string& path) {
  const double v = number(j, path);
  if (!(v > 0)) fail(path, "must be > 0");
  return v;
}

double non_negative(const json& j, const std::string& path) {
  const double v = number(j, path);
  if (v < 0) fail(path, "must be >= 0");
  return v;
}

std::uint64_t integer(const json& j, const std::string& path, std::uint64_t lo, std::uint64_t hi) {
  if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0))
    fail(path, "expected a non-negative integer");
  const auto v = j.get<std::uint64_t>();
  if (v < lo || v > hi) fail(path, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return v;
}

Vec3 vec3(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) fail(path, "expected an array of three numbers");
  return Vec3(number(j[0], child(path, 0)), number(j[1], child(path, 1)), number(j[2], child(path, 2)));
}

template <class F>
void optional_field(const json& obj, const std::string& path, const char* key, F&& f) {
  if (obj.contains(key)) f(obj.at(key), child(path, key));
}

const json& required(const json& obj, const std::string& path, const char* key) {
  if (!obj.contains(key)) fail(child(path, key), "required");
  return obj.at(key);
}

// Runs a library validator and reports its failure at `path`.
template <class F>
void validated(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ParameterError& e) {
    fail(path, e.what());
  }
}

Role parse_role(const json& j, const std::string& path) {
  if (!j.is_string()) fail(path, "expected \"acquisition\" or \"beacon\"");
  const auto s = j.get<std::string>();
  if (s == "acquisition") return Role::Acquisition;
  if (s == "beacon") return Role::Beacon;
  fail(path, "expected \"acquisition\" or \"beacon\", got \"" + s + "\"");
}

const char* role_name(Role r) { return r == Role::Acquisition ? "acquisition" : "beacon"; }

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

// ---------------------------------------------------------------------------
// files

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
  if (!f) throw Error("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json parse_json_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string(), e.what());
  }
}

json require_json(const fs::path& path, const std::string& stage) {
  if (!fs::exists(path))
    throw DependencyError(stage, "missing " + path.filename().string() + " in " + path.parent_path().string() +
                                     "; run the " + stage + " stage first");
  return parse_json_file(path);
}

std::string node_file(const char* prefix, NodeId id, const char* ext) {
  return std::string(prefix) + "_" + std::to_string(id) + ext;
}

// Ids of every <prefix>_<id>.umic in `dir`, ascending.
std::vector<NodeId> list_recordings(const fs::path& dir, const std::string& prefix) {
  std::vector<NodeId> ids;
  if (!fs::is_directory(dir)) return ids;
  const std::regex re(prefix + "_([0-9]+)\\.umic");
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (std::regex_match(name, m, re)) {
      const auto v = std::stoul(m[1].str());
      if (v <= 0xffff) ids.push_back(static_cast<NodeId>(v));
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::optional<ExperimentConfig> config_if_present(const fs::path& out) {
  const auto p = out / "config.json";
  if (!fs::exists(p)) return std::nullopt;
  return parse_config(parse_json_file(p));
}

struct TruthNode {
  ClockModel clock;
  double start_local = 0.0;
  Vec3 position = Vec3::Zero();
};

struct Truth {
  std::map<NodeId, TruthNode> nodes;
  Vec3 source = Vec3::Zero();
};

std::optional<Truth> truth_if_present(const fs::path& out) {
  const auto p = out / "truth.json";
  if (!fs::exists(p)) return std::nullopt;
  const auto j = parse_json_file(p);
  Truth t;
  t.source = vec3(j.at("source").at("position"), "/source/position");
  for (const auto& n : j.at("nodes")) {
    TruthNode tn;
    const auto& c = n.at("clock");
    tn.clock = ClockModel{c.at("offset").get<double>(), c.at("drift_ppm").get<double>(),
                          c.at("sample_rate").get<double>(), c.at("jitter_std").get<double>()};
    tn.start_local = n.at("start_local").get<double>();
    tn.position = vec3(n.at("position"), "/nodes/position");
    t.nodes[n.at("id").get<NodeId>()] = tn;
  }
  return t;
}

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// optical CSV

std::string optical_csv(const EdgeTimestamps& e) {
  std::string s = "t_local,polarity\n";
  for (const auto& edge : e.edges)
    s += fmt(edge.t_local) + (edge.polarity == Polarity::Rising ? ",rising\n" : ",falling\n");
  return s;
}

EdgeTimestamps read_optical_csv(const fs::path& path, double resolution) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path.string());
  EdgeTimestamps e;
  e.resolution = resolution;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (n == 1) {
      if (line != "t_local,polarity") throw SchemaError(path.string() + ":1", "expected header t_local,polarity");
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    const auto where = path.string() + ":" + std::to_string(n);
    if (comma == std::string::npos) throw SchemaError(where, "expected two columns");
    Edge edge;
    try {
      std::size_t used = 0;
      edge.t_local = std::stod(line.substr(0, comma), &used);
      if (used != comma) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw SchemaError(where, "bad time value");
    }
    const auto pol = line.substr(comma + 1);
    if (pol == "rising") edge.polarity = Polarity::Rising;
    else if (pol == "falling") edge.polarity = Polarity::Falling;
    else throw SchemaError(where, "polarity must be rising or falling");
    e.edges.push_back(edge);
  }
  return e;
}

// ---------------------------------------------------------------------------
// sync helpers

// True offset (b lags a, on the sample grids) at time tau of a's grid.
double true_offset(const TruthNode& a, const TruthNode& b, double tau) {
  const double g = to_global(a.clock, a.start_local + tau);
  return (to_local(b.clock, g) - b.start_local) - tau;
}

std::size_t loudest_sample(const PcmStream& pcm) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < pcm.size(); ++i)
    if (std::abs(pcm.samples[i]) > std::abs(pcm.samples[best])) best = i;
  return best;
}

// PCM-rate panel: index, time, mic, sync for PCM samples [lo, hi).
std::string panel_csv(const NodeRecording& r, const PcmStream& pcm, std::int64_t lo, std::int64_t hi,
                      double t0) {
  std::string s = "index,time_s,mic,sync\n";
  const auto n = static_cast<std::int64_t>(pcm.size());
  for (std::int64_t m = std::max<std::int64_t>(lo, 0); m < std::min(hi, n); ++m) {
    const auto bit = static_cast<std::size_t>(m) * kDecimation;
    const int sync = bit < r.sync.size() ? static_cast<int>(r.sync.bits.get(bit)) : 0;
    s += std::to_string(m) + "," + fmt(t0 + static_cast<double>(m) / pcm.sample_rate) + "," +
         fmt(pcm.samples[static_cast<std::size_t>(m)]) + "," + std::to_string(sync) + "\n";
  }
  return s;
}

json stats_json(const StreamStats& s) {
  json gaps = json::array();
  for (const auto& g : s.gaps) gaps.push_back({{"first", g.first}, {"last", g.last ? json(*g.last) : json(nullptr)}});
  return {{"bytes", s.bytes_sent},       {"frames", s.frames_sent},       {"retransmits", s.retransmits},
          {"duplicates", s.duplicates}, {"duration_s", s.duration},      {"achieved_rate_bps", s.achieved_rate},
          {"gaps", gaps},               {"truncated", s.truncated}};
}

// Writes clean recordings as node_<id>.umic and everything to stream_stats.json.
json persist_serve_result(const ServeResult& result, const fs::path& out, std::size_t chunk_samples) {
  fs::create_directories(out);
  json nodes = json::array();
  for (const auto& [id, nr] : result.nodes) {
    auto j = stats_json(nr.stats);
    j["id"] = id;
    j["error"] = nr.error ? json(*nr.error) : json(nullptr);
    const bool clean = !nr.error && !nr.stats.truncated && nr.stats.gaps.empty();
    j["digest"] = clean ? json(recording_digest(nr.recording)) : json(nullptr);
    if (clean) write_recording_file(out / node_file("node", id, ".umic"), nr.recording, chunk_samples);
    nodes.push_back(j);
  }
  json stats = {{"nodes", nodes}, {"rejected", result.rejected}};
  write_json(out / "stream_stats.json", stats);
  return stats;
}

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

std::vector<NodeId> ExperimentConfig::acquisition_ids() const {
  std::vector<NodeId> ids;
  for (const auto& n : nodes)
    if (n.role == Role::Acquisition) ids.push_back(n.id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

NodeId ExperimentConfig::reference_id() const {
  if (reference) return *reference;
  const auto ids = acquisition_ids();
  if (ids.empty()) throw ParameterError("config has no acquisition node");
  return ids.front();
}

const NodeConfig& ExperimentConfig::node(NodeId id) const {
  for (const auto& n : nodes)
    if (n.id == id) return n;
  throw ParameterError("unknown node id " + std::to_string(id));
}

std::array<StationPose, 2> ExperimentConfig::station_poses() const {
  std::array<StationPose, 2> poses;
  for (std::size_t s = 0; s < 2; ++s) {
    const auto& st = lighthouse.stations[s];
    poses[s] = StationPose{static_cast<StationId>(s), st.position, look_at(st.position, st.target)};
  }
  return poses;
}

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig c;
  const std::string root;
  expect_object(doc, root,
                {"seed", "output_dir", "recording_length", "sample_rate", "environment", "source", "nodes", "sync",
                 "lighthouse", "alignment", "localize", "network"});
  c.seed = integer(required(doc, root, "seed"), "/seed", 0, std::numeric_limits<std::uint64_t>::max());
  optional_field(doc, root, "output_dir", [&](const json& j, const std::string& p) {
    if (!j.is_string() || j.get<std::string>().empty()) fail(p, "expected a non-empty string");
    c.output_dir = j.get<std::string>();
  });
  c.recording_length = positive(required(doc, root, "recording_length"), "/recording_length");
  optional_field(doc, root, "sample_rate", [&](const json& j, const std::string& p) { c.sample_rate = positive(j, p); });

  optional_field(doc, root, "environment", [&](const json& j, const std::string& p) {
    expect_object(j, p, {"temperature", "relative_humidity", "pressure"});
    optional_field(j, p, "temperature", [&](const json& v, const std::string& q) { c.environment.temperature = number(v, q); });
    optional_field(j, p, "relative_humidity",
                   [&](const json& v, const std::string& q) { c.environment.relative_humidity = number(v, q); });
    optional_field(j, p, "pressure", [&](const json& v, const std::string& q) { c.environment.pressure = number(v, q); });
    validated(p, [&] { c.environment.validate(); });
  });

  {
    const auto& j = required(doc, root, "source");
    const std::string p = "/source";
    expect_object(j, p, {"position", "start", "sample_rate", "chirp"});
    SourceConfig s;
    s.sample_rate = c.sample_rate / 8;
    s.position = vec3(required(j, p, "position"), child(p, "position"));
    optional_field(j, p, "start", [&](const json& v, const std::string& q) { s.start = number(v, q); });
    optional_field(j, p, "sample_rate", [&](const json& v, const std::string& q) { s.sample_rate = positive(v, q); });
    optional_field(j, p, "chirp", [&](const json& ch, const std::string& q) {
      expect_object(ch, q, {"f0", "f1", "duration", "amplitude"});
      optional_field(ch, q, "f0", [&](const json& v, const std::string& r) { s.chirp.f0 = positive(v, r); });
      optional_field(ch, q, "f1", [&](const json& v, const std::string& r) { s.chirp.f1 = positive(v, r); });
      optional_field(ch, q, "duration", [&](const json& v, const std::string& r) { s.chirp.duration = positive(v, r); });
      optional_field(ch, q, "amplitude", [&](const json& v, const std::string& r) {
        s.chirp.amplitude = positive(v, r);
        if (s.chirp.amplitude > 1) fail(r, "must be <= 1");
      });
      if (s.chirp.f0 >= s.sample_rate / 2 || s.chirp.f1 >= s.sample_rate / 2)
        fail(q, "chirp frequencies must be below half the source sample rate");
    });
    c.source = s;
  }

  {
    const auto& j = required(doc, root, "nodes");
    if (!j.is_array() || j.empty()) fail("/nodes", "expected a non-empty array");
    std::set<NodeId> seen;
    for (std::size_t i = 0; i < j.size(); ++i) {
      const auto p = child("/nodes", i);
      const auto& n = j[i];
      expect_object(n, p, {"id", "role", "position", "clock", "start_local"});
      NodeConfig nc;
      nc.id = static_cast<NodeId>(integer(required(n, p, "id"), child(p, "id"), 0, 0xffff));
      if (!seen.insert(nc.id).second) fail(child(p, "id"), "duplicate node id " + std::to_string(nc.id));
      optional_field(n, p, "role", [&](const json& v, const std::string& q) { nc.role = parse_role(v, q); });
      nc.position = vec3(required(n, p, "position"), child(p, "position"));
      nc.clock.sample_rate = c.sample_rate;
      optional_field(n, p, "clock", [&](const json& cl, const std::string& q) {
        expect_object(cl, q, {"offset", "drift_ppm", "jitter_std"});
        optional_field(cl, q, "offset", [&](const json& v, const std::string& r) { nc.clock.offset = number(v, r); });
        optional_field(cl, q, "drift_ppm", [&](const json& v, const std::string& r) { nc.clock.drift_ppm = number(v, r); });
        optional_field(cl, q, "jitter_std",
                       [&](const json& v, const std::string& r) { nc.clock.jitter_std = non_negative(v, r); });
        validated(q, [&] { nc.clock.validate(); });
      });
      optional_field(n, p, "start_local", [&](const json& v, const std::string& q) { nc.start_local = number(v, q); });
      c.nodes.push_back(nc);
    }
    if (c.acquisition_ids().empty()) fail("/nodes", "at least one acquisition node is required");
  }

  optional_field(doc, root, "sync", [&](const json& j, const std::string& p) {
    expect_object(j, p, {"min_payload", "max_payload", "min_gap", "max_gap", "rx_latency"});
    optional_field(j, p, "min_payload", [&](const json& v, const std::string& q) { c.sync.min_payload = positive(v, q); });
    optional_field(j, p, "max_payload", [&](const json& v, const std::string& q) { c.sync.max_payload = positive(v, q); });
    optional_field(j, p, "min_gap", [&](const json& v, const std::string& q) { c.sync.min_gap = positive(v, q); });
    optional_field(j, p, "max_gap", [&](const json& v, const std::string& q) { c.sync.max_gap = positive(v, q); });
    optional_field(j, p, "rx_latency", [&](const json& v, const std::string& q) { c.sync.rx_latency = non_negative(v, q); });
    validated(p, [&] { c.sync.validate(); });
  });

  {
    const auto& j = required(doc, root, "lighthouse");
    const std::string p = "/lighthouse";
    expect_object(j, p, {"stations", "cycles", "angle_std_deg", "resolution", "timing"});
    auto& lh = c.lighthouse;
    const auto& st = required(j, p, "stations");
    if (!st.is_array() || st.size() != 2) fail(child(p, "stations"), "expected two stations (LH1, LH2)");
    for (std::size_t s = 0; s < 2; ++s) {
      const auto q = child(child(p, "stations"), s);
      expect_object(st[s], q, {"position", "target"});
      lh.stations[s].position = vec3(required(st[s], q, "position"), child(q, "position"));
      lh.stations[s].target = vec3(required(st[s], q, "target"), child(q, "target"));
      if ((lh.stations[s].target - lh.stations[s].position).norm() < 1e-9) fail(q, "target equals position");
    }
    optional_field(j, p, "cycles", [&](const json& v, const std::string& q) { lh.cycles = integer(v, q, 1, 1000000); });
    optional_field(j, p, "angle_std_deg", [&](const json& v, const std::string& q) {
      if (!v.is_array() || v.size() != 2) fail(q, "expected [[az, el], [az, el]] for LH1 and LH2");
      for (std::size_t s = 0; s < 2; ++s) {
        const auto r = child(q, s);
        if (!v[s].is_array() || v[s].size() != 2) fail(r, "expected [az, el]");
        for (std::size_t a = 0; a < 2; ++a) lh.angle_std_deg[s][a] = non_negative(v[s][a], child(r, a));
      }
    });
    optional_field(j, p, "resolution", [&](const json& v, const std::string& q) { lh.resolution = non_negative(v, q); });
    optional_field(j, p, "timing", [&](const json& t, const std::string& q) {
      expect_object(t, q, {"rotation_period", "slot_period", "flash_duration", "sweep_pulse"});
      optional_field(t, q, "rotation_period",
                     [&](const json& v, const std::string& r) { lh.timing.rotation_period = positive(v, r); });
      optional_field(t, q, "slot_period", [&](const json& v, const std::string& r) { lh.timing.slot_period = positive(v, r); });
      optional_field(t, q, "flash_duration",
                     [&](const json& v, const std::string& r) { lh.timing.flash_duration = positive(v, r); });
      optional_field(t, q, "sweep_pulse", [&](const json& v, const std::string& r) { lh.timing.sweep_pulse = positive(v, r); });
      validated(q, [&] { lh.timing.validate(); });
    });
  }

  optional_field(doc, root, "alignment", [&](const json& j, const std::string& p) {
    expect_object(j, p, {"reference", "window", "hop", "max_lag"});
    optional_field(j, p, "reference", [&](const json& v, const std::string& q) {
      const auto id = static_cast<NodeId>(integer(v, q, 0, 0xffff));
      const auto acq = c.acquisition_ids();
      if (std::find(acq.begin(), acq.end(), id) == acq.end()) fail(q, "not an acquisition node id");
      c.reference = id;
    });
    optional_field(j, p, "window", [&](const json& v, const std::string& q) { c.alignment.window = positive(v, q); });
    optional_field(j, p, "hop", [&](const json& v, const std::string& q) { c.alignment.hop = positive(v, q); });
    optional_field(j, p, "max_lag", [&](const json& v, const std::string& q) { c.alignment.max_lag = positive(v, q); });
  });

  optional_field(doc, root, "localize", [&](const json& j, const std::string& p) {
    expect_object(j, p, {"band"});
    optional_field(j, p, "band", [&](const json& v, const std::string& q) {
      if (!v.is_array() || v.size() != 2) fail(q, "expected [low, high] in Hz");
      c.band.low = non_negative(v[0], child(q, 0));
      c.band.high = positive(v[1], child(q, 1));
      if (c.band.high <= c.band.low) fail(q, "high must exceed low");
    });
  });

  optional_field(doc, root, "network", [&](const json& j, const std::string& p) {
    expect_object(j, p, {"bind", "rate_cap", "chunk_samples"});
    optional_field(j, p, "bind", [&](const json& v, const std::string& q) {
      if (!v.is_string()) fail(q, "expected \"host:port\"");
      validated(q, [&] { parse_endpoint(v.get<std::string>()); });
      c.network.bind = v.get<std::string>();
    });
    optional_field(j, p, "rate_cap", [&](const json& v, const std::string& q) { c.network.rate_cap = positive(v, q); });
    optional_field(j, p, "chunk_samples",
                   [&](const json& v, const std::string& q) { c.network.chunk_samples = integer(v, q, 8, 1u << 24); });
  });
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ParameterError("config file not found: " + path.string());
  return parse_config(parse_json_file(path));
}

json to_json(const ExperimentConfig& c) {
  json nodes = json::array();
  for (const auto& n : c.nodes)
    nodes.push_back({{"id", n.id},
                     {"role", role_name(n.role)},
                     {"position", vec_json(n.position)},
                     {"clock", {{"offset", n.clock.offset}, {"drift_ppm", n.clock.drift_ppm}, {"jitter_std", n.clock.jitter_std}}},
                     {"start_local", n.start_local}});
  const auto& lh = c.lighthouse;
  json stations = json::array();
  for (const auto& s : lh.stations) stations.push_back({{"position", vec_json(s.position)}, {"target", vec_json(s.target)}});
  json j = {
      {"seed", c.seed},
      {"recording_length", c.recording_length},
      {"sample_rate", c.sample_rate},
      {"environment",
       {{"temperature", c.environment.temperature},
        {"relative_humidity", c.environment.relative_humidity},
        {"pressure", c.environment.pressure}}},
      {"nodes", nodes},
      {"sync",
       {{"min_payload", c.sync.min_payload},
        {"max_payload", c.sync.max_payload},
        {"min_gap", c.sync.min_gap},
        {"max_gap", c.sync.max_gap},
        {"rx_latency", c.sync.rx_latency}}},
      {"lighthouse",
       {{"stations", stations},
        {"cycles", lh.cycles},
        {"angle_std_deg", lh.angle_std_deg},
        {"resolution", lh.resolution},
        {"timing",
         {{"rotation_period", lh.timing.rotation_period},
          {"slot_period", lh.timing.slot_period},
          {"flash_duration", lh.timing.flash_duration},
          {"sweep_pulse", lh.timing.sweep_pulse}}}}},
      {"alignment",
       {{"reference", c.reference_id()}, {"window", c.alignment.window}, {"hop", c.alignment.hop}, {"max_lag", c.alignment.max_lag}}},
      {"localize", {{"band", {c.band.low, c.band.high}}}},
      {"network", {{"bind", c.network.bind}, {"rate_cap", c.network.rate_cap}, {"chunk_samples", c.network.chunk_samples}}},
  };
  if (c.output_dir) j["output_dir"] = *c.output_dir;
  if (c.source) {
    const auto& s = *c.source;
    j["source"] = {{"position", vec_json(s.position)},
                   {"start", s.start},
                   {"sample_rate", s.sample_rate},
                   {"chirp", {{"f0", s.chirp.f0}, {"f1", s.chirp.f1}, {"duration", s.chirp.duration}, {"amplitude", s.chirp.amplitude}}}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// stages

void cmd_simulate(const ExperimentConfig& config, const fs::path& out) {
  fs::create_directories(out);
  const auto poses = config.station_poses();

  Scene scene;
  scene.environment = config.environment;
  scene.recording_length = config.recording_length;
  const auto& src = config.source.value();
  scene.source_position = src.position;
  scene.source_start = src.start;
  scene.source_signal = linear_chirp(src.chirp.f0, src.chirp.f1, src.chirp.duration, src.chirp.amplitude, src.sample_rate);
  double horizon = 0.0;
  for (const auto& n : config.nodes) {
    horizon = std::max(horizon, to_global(n.clock, n.start_local + config.recording_length));
    if (n.role == Role::Acquisition) scene.nodes.push_back(SceneNode{n.id, n.position, n.clock, n.start_local});
  }
  const auto schedule = generate_schedule(derive_seed(config.seed, kStreamSchedule), horizon + 0.05, config.sync);
  const auto recordings = synthesize(scene, schedule, derive_seed(config.seed, kStreamAcoustic));
  for (const auto& r : recordings)
    write_recording_file(out / node_file("node", r.node_id, ".umic"), r, config.network.chunk_samples);

  const auto& lh = config.lighthouse;
  json truth_nodes = json::array();
  for (const auto& n : config.nodes) {
    SweepOptions opt;
    opt.resolution = lh.resolution;
    opt.seed = derive_seed(config.seed, kStreamOptical + n.id);
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t a = 0; a < 2; ++a)
        opt.sweep_jitter[2 * s + a] = sweep_jitter_for_angle_std(lh.angle_std_deg[s][a] * kDeg, lh.timing.rotation_period);
    const auto edges = simulate_sweeps(poses, lh.timing, n.position, n.clock, lh.cycles, opt);
    write_text(out / node_file("optical", n.id, ".csv"), optical_csv(edges));

    json tn = {{"id", n.id},
               {"role", role_name(n.role)},
               {"position", vec_json(n.position)},
               {"clock",
                {{"offset", n.clock.offset},
                 {"drift_ppm", n.clock.drift_ppm},
                 {"sample_rate", n.clock.sample_rate},
                 {"jitter_std", n.clock.jitter_std}}},
               {"start_local", n.start_local}};
    for (const auto& r : recordings)
      if (r.node_id == n.id) {
        tn["first_sample_index"] = r.first_sample_index;
        tn["samples"] = r.size();
      }
    truth_nodes.push_back(tn);
  }
  json stations = json::array();
  for (const auto& p : poses) {
    json rows = json::array();
    for (int r = 0; r < 3; ++r) rows.push_back({p.orientation(r, 0), p.orientation(r, 1), p.orientation(r, 2)});
    stations.push_back({{"id", to_string(p.id)}, {"position", vec_json(p.position)}, {"orientation", rows}});
  }
  const json truth = {
      {"seed", config.seed},
      {"speed_of_sound", speed_of_sound(config.environment)},
      {"source", {{"position", vec_json(src.position)}, {"start", src.start}, {"duration", src.chirp.duration}}},
      {"nodes", truth_nodes},
      {"stations", stations},
      {"sync_schedule", {{"events", schedule.events.size()}, {"duration", horizon + 0.05}}},
  };
  write_json(out / "truth.json", truth);
  write_json(out / "config.json", to_json(config));
  write_report(out);
}

json cmd_calibrate(const fs::path& out) {
  const auto config = parse_config(require_json(out / "config.json", "simulate"));
  const auto truth = truth_if_present(out);
  std::map<NodeId, EdgeTimestamps> edges;
  for (const auto& n : config.nodes) {
    const auto p = out / node_file("optical", n.id, ".csv");
    if (!fs::exists(p)) throw DependencyError("simulate", "missing " + p.filename().string() + "; run the simulate stage first");
    edges[n.id] = read_optical_csv(p, config.lighthouse.resolution);
  }
  const auto result = self_calibrate(edges, config.station_poses(), config.lighthouse.timing);

  json nodes = json::array();
  std::string angles_csv = "node,station,cycle,azimuth_deg,elevation_deg\n";
  double max_error = 0.0;
  for (const auto& [id, fix] : result.fixes) {
    json angles = json::array();
    for (const auto& m : result.angles.at(id)) {
      angles.push_back({{"station", to_string(m.station)},
                        {"azimuth_deg", m.azimuth / kDeg},
                        {"elevation_deg", m.elevation / kDeg},
                        {"az_std_deg", m.az_std / kDeg},
                        {"el_std_deg", m.el_std / kDeg},
                        {"n_cycles", m.n_cycles}});
      for (std::size_t k = 0; k < m.azimuths.size(); ++k)
        angles_csv += std::to_string(id) + "," + to_string(m.station) + "," + std::to_string(k) + "," +
                      fmt(m.azimuths[k] / kDeg) + "," + fmt(m.elevations[k] / kDeg) + "\n";
    }
    json jn = {{"id", id},
               {"position", vec_json(fix.position)},
               {"residual_m", fix.residual},
               {"condition", fix.condition},
               {"angles", angles}};
    if (truth && truth->nodes.count(id)) {
      const double err = (fix.position - truth->nodes.at(id).position).norm();
      jn["truth_position"] = vec_json(truth->nodes.at(id).position);
      jn["error_m"] = err;
      max_error = std::max(max_error, err);
    }
    nodes.push_back(jn);
  }
  json errors = json::object();
  for (const auto& [id, msg] : result.errors) errors[std::to_string(id)] = msg;
  json doc = {{"nodes", nodes}, {"errors", errors}};
  if (truth) doc["max_error_m"] = max_error;
  write_json(out / "calibration.json", doc);
  write_text(out / "calibration_angles.csv", angles_csv);
  write_report(out);
  if (result.fixes.empty()) throw GeometryError("calibration failed for every node: " + errors.dump());
  return doc;
}

json cmd_sync(const fs::path& out) {
  const auto ids = list_recordings(out, "node");
  if (ids.empty())
    throw DependencyError("simulate", "no node_*.umic recordings in " + out.string() + "; run simulate or serve first");
  const auto config = config_if_present(out);
  const auto truth = truth_if_present(out);
  const AlignOptions opts = config ? config->alignment : AlignOptions{};
  const NodeId ref = config ? config->reference_id() : ids.front();
  if (std::find(ids.begin(), ids.end(), ref) == ids.end())
    throw DependencyError("simulate", "reference recording node_" + std::to_string(ref) + ".umic is missing");

  std::vector<NodeRecording> raw;
  for (auto id : ids) raw.push_back(read_recording_file(out / node_file("node", id, ".umic")));
  const auto aligned = align(raw, ref, opts);

  const auto& raw_ref = *std::find_if(raw.begin(), raw.end(), [&](const auto& r) { return r.node_id == ref; });
  const double fs_ = raw_ref.sample_rate();
  const auto truth_of = [&](const NodeRecording& r) -> std::optional<TruthNode> {
    if (!truth || !truth->nodes.count(r.node_id)) return std::nullopt;
    return truth->nodes.at(r.node_id);
  };

  json nodes = json::array();
  double max_err = 0.0;
  bool have_truth = false;
  std::size_t ref_begin = 0;
  for (const auto& a : aligned) {
    const auto& info = a.alignment.value();
    ref_begin = info.ref_begin;
    json jn = {{"id", a.node_id},
               {"shift_samples", info.shift_samples},
               {"offset0_s", info.offset0},
               {"drift_ppm", info.drift_ppm},
               {"anchor_time_s", info.anchor_time},
               {"residual_samples", info.residual_samples},
               {"peak_corr", info.peak_corr}};
    const auto tb = truth_of(a);
    const auto ta = truth_of(raw_ref);
    if (ta && tb && a.node_id != ref) {
      have_truth = true;
      const double est = info.offset0 + info.drift_ppm * 1e-6 * info.anchor_time;
      const double at_anchor = est - true_offset(*ta, *tb, info.anchor_time);
      double worst = 0.0;
      const double t0 = static_cast<double>(info.ref_begin) / fs_;
      const double span = static_cast<double>(a.size()) / fs_;
      for (int k = 0; k <= 20; ++k) {
        const double tau = t0 + span * k / 20.0;
        worst = std::max(worst, std::abs(info.offset0 + info.drift_ppm * 1e-6 * tau - true_offset(*ta, *tb, tau)));
      }
      jn["truth"] = {{"offset_at_anchor_s", true_offset(*ta, *tb, info.anchor_time)},
                     {"drift_ppm", (tb->clock.rate() / ta->clock.rate() - 1.0) * 1e6},
                     {"error_at_anchor_s", at_anchor},
                     {"max_abs_error_s", worst}};
      max_err = std::max(max_err, worst);
    }
    nodes.push_back(jn);
    write_recording_file(out / node_file("aligned", a.node_id, ".umic"), a,
                         config ? config->network.chunk_samples : kDefaultChunkSamples);
    write_wav(out / node_file("aligned", a.node_id, ".wav"), pdm_demodulate(a.mic, kDecimation));
  }

  json doc = {{"reference", ref},
              {"sample_rate", fs_},
              {"common_window", {{"ref_begin", ref_begin}, {"samples", aligned.front().size()}}},
              {"nodes", nodes}};
  if (have_truth) doc["max_abs_offset_error_s"] = max_err;

  // Figure panels: reference and the first other node, before and after.
  if (raw.size() >= 2) {
    const auto& raw_b = *std::find_if(raw.begin(), raw.end(), [&](const auto& r) { return r.node_id != ref; });
    const auto& al_a = *std::find_if(aligned.begin(), aligned.end(), [&](const auto& r) { return r.node_id == ref; });
    const auto& al_b = *std::find_if(aligned.begin(), aligned.end(), [&](const auto& r) { return r.node_id == raw_b.node_id; });
    const auto pcm_ra = pdm_demodulate(raw_ref.mic, kDecimation);
    const auto pcm_rb = pdm_demodulate(raw_b.mic, kDecimation);
    const auto pcm_aa = pdm_demodulate(al_a.mic, kDecimation);
    const auto pcm_ab = pdm_demodulate(al_b.mic, kDecimation);
    const auto peak = static_cast<std::int64_t>(loudest_sample(pcm_ra));
    const auto half = static_cast<std::int64_t>(std::llround(kFigureHalfWindow * pcm_ra.sample_rate));
    const auto ab = static_cast<std::int64_t>(ref_begin / kDecimation);
    const auto sa = std::to_string(ref), sb = std::to_string(raw_b.node_id);
    write_text(out / ("fig3_raw_" + sa + ".csv"), panel_csv(raw_ref, pcm_ra, peak - half, peak + half, raw_ref.start_local));
    write_text(out / ("fig3_raw_" + sb + ".csv"), panel_csv(raw_b, pcm_rb, peak - half, peak + half, raw_b.start_local));
    const double t_al = raw_ref.start_local + static_cast<double>(ref_begin) / fs_;
    write_text(out / ("fig3_aligned_" + sa + ".csv"), panel_csv(al_a, pcm_aa, peak - ab - half, peak - ab + half, t_al));
    write_text(out / ("fig3_aligned_" + sb + ".csv"), panel_csv(al_b, pcm_ab, peak - ab - half, peak - ab + half, t_al));

    const auto& info_b = al_b.alignment.value();
    const auto len = std::min<std::size_t>(static_cast<std::size_t>(kFigureCorrWindow * fs_), raw_ref.size());
    const auto anchor = static_cast<std::int64_t>(std::llround(info_b.anchor_time * fs_));
    const auto begin = static_cast<std::size_t>(
        std::clamp<std::int64_t>(anchor - static_cast<std::int64_t>(len / 2), 0, static_cast<std::int64_t>(raw_ref.size() - len)));
    const auto curve = correlation_curve(raw_ref.sync.bits, begin, len, raw_b.sync.bits, info_b.shift_samples, kFigureHalfLag);
    std::string csv = "lag_samples,lag_s,correlation\n";
    for (std::size_t i = 0; i < curve.values.size(); ++i) {
      const auto lag = curve.first_lag + static_cast<std::int64_t>(i);
      const double v = curve.values[i];
      csv += std::to_string(lag) + "," + fmt(static_cast<double>(lag) / fs_) + "," + (std::isfinite(v) ? fmt(v) : "nan") + "\n";
    }
    write_text(out / "fig3_correlation.csv", csv);
    const auto pk = find_peak(curve);
    doc["figure"] = {{"node_a", ref},
                     {"node_b", raw_b.node_id},
                     {"window_begin", begin},
                     {"window_samples", len},
                     {"peak_lag", pk.lag},
                     {"refined_lag", pk.refined_lag},
                     {"offset_s", pk.refined_lag / fs_},
                     {"peak_value", pk.value},
                     {"shift_samples", info_b.shift_samples},
                     {"panels",
                      {"fig3_raw_" + sa + ".csv", "fig3_raw_" + sb + ".csv", "fig3_aligned_" + sa + ".csv",
                       "fig3_aligned_" + sb + ".csv", "fig3_correlation.csv"}}};
  }
  write_json(out / "sync.json", doc);
  write_report(out);
  return doc;
}

json cmd_localize(const fs::path& out) {
  const auto config = parse_config(require_json(out / "config.json", "simulate"));
  const auto cal = require_json(out / "calibration.json", "calibrate");
  const auto sync = require_json(out / "sync.json", "sync");
  const auto truth = truth_if_present(out);
  const double c = speed_of_sound(config.environment);
  const double fs_ = sync.at("sample_rate").get<double>();
  const auto ref = sync.at("reference").get<NodeId>();
  const auto ref_begin = sync.at("common_window").at("ref_begin").get<std::size_t>();

  std::map<NodeId, Vec3> positions;
  for (const auto& n : cal.at("nodes")) positions[n.at("id").get<NodeId>()] = vec3(n.at("position"), "/nodes/position");
  std::map<NodeId, AlignmentInfo> infos;
  std::map<NodeId, PcmStream> streams;
  for (const auto& n : sync.at("nodes")) {
    const auto id = n.at("id").get<NodeId>();
    if (!positions.count(id)) continue;
    const auto p = out / node_file("aligned", id, ".umic");
    if (!fs::exists(p)) throw DependencyError("sync", "missing " + p.filename().string() + "; run the sync stage first");
    AlignmentInfo info;
    info.reference = ref;
    info.shift_samples = n.at("shift_samples").get<std::int64_t>();
    info.offset0 = n.at("offset0_s").get<double>();
    info.drift_ppm = n.at("drift_ppm").get<double>();
    info.anchor_time = n.at("anchor_time_s").get<double>();
    info.residual_samples = n.at("residual_samples").get<double>();
    info.ref_begin = ref_begin;
    infos[id] = info;
    streams[id] = pdm_demodulate(read_recording_file(p).mic, kDecimation);
  }
  if (!streams.count(ref)) throw ParameterError("reference node " + std::to_string(ref) + " has no calibrated position");
  if (streams.size() < 4)
    throw ParameterError("localization needs at least four calibrated, aligned acquisition nodes; have " +
                         std::to_string(streams.size()));
  for (auto it = positions.begin(); it != positions.end();)
    it = streams.count(it->first) ? std::next(it) : positions.erase(it);

  // Chirp instant on the reference's raw grid, from the loudest reference sample.
  const auto& ref_pcm = streams.at(ref);
  const double t = (static_cast<double>(ref_begin) + static_cast<double>(loudest_sample(ref_pcm) * kDecimation)) / fs_;
  double aperture = 0.0;
  for (const auto& [a, pa] : positions)
    for (const auto& [b, pb] : positions) aperture = std::max(aperture, (pa - pb).norm());
  double residual = 0.0;
  for (const auto& [id, info] : infos) residual = std::max(residual, std::abs(info.residual_at(t, fs_)));
  const double max_delay = aperture / c + residual / fs_ + 2.0 / ref_pcm.sample_rate;

  const auto tdoa = correct_tdoa(estimate_tdoa(streams, ref, config.band, max_delay), infos, t, fs_);
  const auto fix = multilaterate(tdoa, positions, c);

  json entries = json::array();
  for (const auto& e : tdoa.entries) {
    json je = {{"node", e.node}, {"delay_s", e.delay}, {"confidence", e.confidence}, {"flagged", e.flagged}};
    if (truth && truth->nodes.count(e.node) && truth->nodes.count(ref))
      je["geometric_delay_s"] = ((truth->nodes.at(e.node).position - truth->source).norm() -
                                 (truth->nodes.at(ref).position - truth->source).norm()) / c;
    entries.push_back(je);
  }
  json doc = {{"reference", ref},
              {"speed_of_sound", c},
              {"chirp_time_s", t},
              {"max_delay_s", max_delay},
              {"tdoa", entries},
              {"fix",
               {{"position", vec_json(fix.position)}, {"rms_residual_s", fix.rms_residual}, {"iterations", fix.iterations}}},
              {"dop_m_per_s", dilution_of_precision(tdoa, positions, c, fix.position)}};
  if (truth) doc["truth"] = {{"position", vec_json(truth->source)}, {"error_m", (fix.position - truth->source).norm()}};
  write_json(out / "localize.json", doc);
  write_report(out);
  return doc;
}

ServeSummary cmd_serve(const Endpoint& bind, const fs::path& out, std::size_t expected_nodes, double timeout) {
  if (expected_nodes == 0) throw ParameterError("expected node count must be >= 1");
  ServeSummary s;
  s.result = serve(bind, ServerOptions{expected_nodes, timeout});
  const auto config = config_if_present(out);
  s.stats = persist_serve_result(s.result, out, config ? config->network.chunk_samples : kDefaultChunkSamples);
  write_report(out);
  std::string bad;
  for (const auto& [id, nr] : s.result.nodes) {
    if (nr.error) bad += " node " + std::to_string(id) + ": " + *nr.error + ";";
    else if (nr.stats.truncated || !nr.stats.gaps.empty()) bad += " node " + std::to_string(id) + ": incomplete stream;";
  }
  if (!bad.empty()) throw TransportError("collection finished with errors:" + bad);
  return s;
}

json cmd_node(const Endpoint& connect, const std::vector<fs::path>& files, double rate_cap, std::size_t chunk_samples) {
  if (files.empty()) throw ParameterError("no recording files given");
  std::vector<NodeRecording> recs;
  for (const auto& f : files) {
    if (!fs::exists(f)) throw ParameterError("recording file not found: " + f.string());
    recs.push_back(read_recording_file(f));
  }
  std::vector<StreamStats> stats(recs.size());
  std::vector<std::exception_ptr> errors(recs.size());
  std::vector<std::thread> threads;
  StreamOptions opts;
  opts.rate_cap = rate_cap;
  opts.chunk_samples = chunk_samples;
  for (std::size_t i = 0; i < recs.size(); ++i)
    threads.emplace_back([&, i] {
      try {
        stats[i] = stream_node(recs[i], connect, opts);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  json doc = json::array();
  for (std::size_t i = 0; i < recs.size(); ++i) {
    auto j = stats_json(stats[i]);
    j["file"] = files[i].string();
    j["node"] = recs[i].node_id;
    j["digest"] = recording_digest(recs[i]);
    doc.push_back(j);
  }
  return {{"streams", doc}, {"rate_cap_bps", rate_cap}};
}

std::vector<CheckLine> cmd_demo(const ExperimentConfig& config, const fs::path& out) {
  std::vector<CheckLine> checks;
  cmd_simulate(config, out);

  // Offload every recording through a loopback collector.
  {
    const auto ids = config.acquisition_ids();
    std::vector<fs::path> files;
    std::map<NodeId, std::string> sent;
    for (auto id : ids) {
      files.push_back(out / node_file("node", id, ".umic"));
      sent[id] = recording_digest(read_recording_file(files.back()));
    }
    CollectionServer server(Endpoint{"127.0.0.1", 0}, ServerOptions{ids.size(), 120.0});
    ServeResult result;
    std::exception_ptr server_error;
    std::thread t([&] {
      try {
        result = server.run();
      } catch (...) {
        server_error = std::current_exception();
      }
    });
    json sent_stats;
    try {
      sent_stats = cmd_node(Endpoint{"127.0.0.1", server.port()}, files, config.network.rate_cap, config.network.chunk_samples);
    } catch (...) {
      t.join();
      throw;
    }
    t.join();
    if (server_error) std::rethrow_exception(server_error);
    bool match = result.nodes.size() == ids.size();
    for (const auto& [id, nr] : result.nodes)
      match = match && !nr.error && nr.stats.gaps.empty() && recording_digest(nr.recording) == sent.at(id);
    double worst_rate = 0.0;
    for (const auto& s : sent_stats.at("streams")) worst_rate = std::max(worst_rate, s.at("achieved_rate_bps").get<double>());
    persist_serve_result(result, out, config.network.chunk_samples);
    const bool capped = worst_rate <= config.network.rate_cap * 1.05;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu streams, digests %s, max rate %.3f Mbit/s (cap %.3f)", ids.size(),
                  match ? "match" : "DIFFER", worst_rate / 1e6, config.network.rate_cap / 1e6);
    checks.push_back({"offload: loopback lossless and rate-capped", match && capped, buf});
  }

  {
    const auto cal = cmd_calibrate(out);
    const bool all = cal.at("errors").empty();
    const double err = cal.value("max_error_m", std::numeric_limits<double>::infinity());
    char buf[120];
    std::snprintf(buf, sizeof buf, "max node position error %.3g m over %zu nodes", err, cal.at("nodes").size());
    checks.push_back({"calibration: every node within 1 cm", all && err < 0.01, buf});
  }

  if (config.acquisition_ids().size() >= 2) {
    const auto sync = cmd_sync(out);
    const double err = sync.value("max_abs_offset_error_s", std::numeric_limits<double>::infinity());
    char buf[120];
    std::snprintf(buf, sizeof buf, "max post-alignment offset error %.3f us", err * 1e6);
    checks.push_back({"sync: post-alignment offset error < 1 us", err < 1e-6, buf});

    const auto& fig = sync.at("figure");
    bool panels = true;
    for (const auto& p : fig.at("panels")) panels = panels && fs::exists(out / p.get<std::string>());
    const auto argmax = correlation_csv_argmax(out / "fig3_correlation.csv");
    const auto reported = fig.at("peak_lag").get<std::int64_t>();
    std::snprintf(buf, sizeof buf, "csv argmax %lld, reported peak lag %lld, alignment shift %lld", static_cast<long long>(argmax),
                  static_cast<long long>(reported), static_cast<long long>(fig.at("shift_samples").get<std::int64_t>()));
    checks.push_back({"figure: five panels, correlation argmax equals reported offset", panels && argmax == reported, buf});
  }

  if (config.acquisition_ids().size() >= 4) {
    const auto loc = cmd_localize(out);
    const double err = loc.at("truth").at("error_m").get<double>();
    char buf[120];
    std::snprintf(buf, sizeof buf, "source fix error %.4f m", err);
    checks.push_back({"localize: source fix within 5 cm", err < 0.05, buf});
  }

  {
    const double h = battery_runtime(1400, 245);
    char buf[120];
    std::snprintf(buf, sizeof buf, "1400 mAh / 245 mA = %.2f h (reference 5.5 h)", h);
    checks.push_back({"battery: runtime within 5% of 5.5 h", std::abs(h - 5.5) / 5.5 <= 0.05, buf});
  }
  return checks;
}

double battery_runtime(double capacity_mah, double current_ma) {
  if (!(capacity_mah > 0) || !std::isfinite(capacity_mah)) throw ParameterError("capacity must be > 0 mAh");
  if (!(current_ma > 0) || !std::isfinite(current_ma)) throw ParameterError("current must be > 0 mA");
  return capacity_mah / current_ma;
}

void write_report(const fs::path& out) {
  json report = {{"run_info", {{"tool", "umic"}, {"version", kToolVersion}, {"generated_at", iso_timestamp()}}}};
  const auto section = [&](const char* key, const char* file) {
    const auto p = out / file;
    report[key] = fs::exists(p) ? parse_json_file(p) : json(nullptr);
  };
  section("config", "config.json");
  section("calibration", "calibration.json");
  section("sync", "sync.json");
  section("localize", "localize.json");
  section("network", "stream_stats.json");
  if (report["config"].is_object()) {
    const auto cfg = parse_config(report["config"]);
    report["environment"] = report["config"]["environment"];
    report["environment"]["speed_of_sound"] = speed_of_sound(cfg.environment);
  } else {
    report["environment"] = nullptr;
  }
  write_json(out / "report.json", report);
}

std::int64_t correlation_csv_argmax(const fs::path& csv) {
  std::ifstream f(csv);
  if (!f) throw Error("cannot read " + csv.string());
  std::string line;
  std::getline(f, line);
  std::optional<std::int64_t> best;
  double best_v = -std::numeric_limits<double>::infinity();
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string lag_s, sec, val;
    std::getline(ss, lag_s, ',');
    std::getline(ss, sec, ',');
    std::getline(ss, val, ',');
    if (val == "nan" || val.empty()) continue;
    const auto lag = std::stoll(lag_s);
    const double v = std::stod(val);
    if (!best || v > best_v || (v == best_v && std::llabs(lag) < std::llabs(*best))) {
      best = lag;
      best_v = v;
    }
  }
  if (!best) throw NoSyncLockError("correlation curve has no finite value", 0.0);
  return *best;
}

int exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const SchemaError*>(&e) || dynamic_cast<const ParameterError*>(&e)) return 2;
  if (dynamic_cast<const GeometryError*>(&e) || dynamic_cast<const DecodeError*>(&e)) return 3;
  if (dynamic_cast<const NoSyncLockError*>(&e) || dynamic_cast<const AlignmentError*>(&e)) return 4;
  if (dynamic_cast<const TransportError*>(&e) || dynamic_cast<const FramingError*>(&e) ||
      dynamic_cast<const CorruptionError*>(&e))
    return 5;
  if (dynamic_cast<const ConvergenceError*>(&e) || dynamic_cast<const RankDeficiencyError*>(&e)) return 6;
  if (dynamic_cast<const DependencyError*>(&e)) return 7;
  return 1;
}

}  // namespace umic::cli
