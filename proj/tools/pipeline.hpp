#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umic/acoustics.hpp"
#include "umic/align.hpp"
#include "umic/lighthouse.hpp"
#include "umic/localize.hpp"
#include "umic/netproto.hpp"
#include "umic/syncsig.hpp"

namespace umic::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "1.0.0";

enum class Role { Acquisition, Beacon };

struct NodeConfig {
  NodeId id = 0;
  Role role = Role::Acquisition;
  Vec3 position = Vec3::Zero();
  ClockModel clock;
  double start_local = 0.1;
};

struct ChirpConfig {
  double f0 = 30e3;
  double f1 = 100e3;
  double duration = 0.004;
  double amplitude = 0.3;
};

struct SourceConfig {
  Vec3 position = Vec3::Zero();
  double start = 0.3;  ///< global seconds
  double sample_rate = kNominalSampleRate / 8;
  ChirpConfig chirp;
};

struct StationConfig {
  Vec3 position = Vec3::Zero();
  Vec3 target = Vec3::Zero();
};

struct LighthouseConfig {
  std::array<StationConfig, 2> stations;
  SweepTiming timing;
  std::size_t cycles = 60;
  /// Per station {azimuth, elevation} angle noise, degrees.
  std::array<std::array<double, 2>, 2> angle_std_deg{};
  double resolution = 1e-6;
};

struct NetworkConfig {
  std::string bind = "127.0.0.1:7700";
  double rate_cap = kDefaultRateCap;
  std::size_t chunk_samples = kDefaultChunkSamples;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::optional<std::string> output_dir;
  double recording_length = 1.0;
  double sample_rate = kNominalSampleRate;
  Environment environment;
  std::optional<SourceConfig> source;
  std::vector<NodeConfig> nodes;
  SyncParams sync;
  LighthouseConfig lighthouse;
  std::optional<NodeId> reference;  ///< alignment / TDOA reference; default first acquisition node
  AlignOptions alignment;
  Band band{25e3, 105e3};
  NetworkConfig network;

  std::vector<NodeId> acquisition_ids() const;
  NodeId reference_id() const;
  const NodeConfig& node(NodeId id) const;
  std::array<StationPose, 2> station_poses() const;
};

/// Validates and applies defaults. Throws SchemaError carrying the JSON
/// pointer of the offending value.
ExperimentConfig parse_config(const json& doc);
ExperimentConfig load_config(const fs::path& path);
/// Canonical form with every default spelled out.
json to_json(const ExperimentConfig& config);

/// Writes node_<id>.umic (acquisition nodes), optical_<id>.csv, truth.json,
/// config.json and report.json.
void cmd_simulate(const ExperimentConfig& config, const fs::path& out);
/// Reads optical_*.csv; writes calibration.json and calibration_angles.csv.
json cmd_calibrate(const fs::path& out);
/// Reads node_*.umic; writes sync.json, aligned_<id>.umic / .wav and the
/// five fig3_*.csv panels.
json cmd_sync(const fs::path& out);
/// Reads calibration.json, sync.json and aligned recordings; writes
/// localize.json.
json cmd_localize(const fs::path& out);

struct ServeSummary {
  ServeResult result;
  json stats;
};
/// Receives expected_nodes recordings and writes them as node_<id>.umic plus
/// stream_stats.json.
ServeSummary cmd_serve(const Endpoint& bind, const fs::path& out, std::size_t expected_nodes, double timeout);
/// Streams each file to the collector concurrently; returns stats per file.
json cmd_node(const Endpoint& connect, const std::vector<fs::path>& files, double rate_cap, std::size_t chunk_samples);

struct CheckLine {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// simulate -> loopback offload -> calibrate -> sync -> localize (with four
/// or more acquisition nodes) and the pass/fail summary.
std::vector<CheckLine> cmd_demo(const ExperimentConfig& config, const fs::path& out);

/// Hours of runtime: capacity (mAh) / current (mA). Throws ParameterError for
/// non-positive inputs.
double battery_runtime(double capacity_mah, double current_ma);

/// Rebuilds report.json from whatever stage fragments exist in `out`.
void write_report(const fs::path& out);

/// Reads a fig3 correlation CSV and returns the lag of its largest value
/// (ties toward the smaller |lag|).
std::int64_t correlation_csv_argmax(const fs::path& csv);

/// Exit code for an exception (0 is success).
int exit_code_for(const std::exception& e) noexcept;

}  // namespace umic::cli
