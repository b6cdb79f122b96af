// umic: simulate, calibrate, synchronize, offload and localize.
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "pipeline.hpp"

using namespace umic;
using namespace umic::cli;

namespace {

struct Args {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string bind;
  std::string connect;
  std::optional<double> rate_cap;
  std::size_t chunk = kDefaultChunkSamples;
  std::size_t nodes = 1;
  double timeout = 60.0;
  std::vector<std::string> files;
  double capacity = 0.0;
  double current = 0.0;
};

ExperimentConfig configured(const Args& a) {
  auto c = load_config(a.config);
  if (a.seed) c.seed = *a.seed;
  if (a.rate_cap) c.network.rate_cap = *a.rate_cap;
  return c;
}

fs::path out_dir(const Args& a, const ExperimentConfig* c) {
  if (!a.out.empty()) return a.out;
  if (c && c->output_dir) return *c->output_dir;
  return "out";
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wireless ultrasound microphone network, desk-scale twin"};
  app.require_subcommand(1);
  Args a;

  auto* sim = app.add_subcommand("simulate", "Synthesize recordings, optical edges and ground truth");
  sim->add_option("--config", a.config, "Experiment config (JSON)")->required();
  sim->add_option("--out", a.out, "Output directory");
  sim->add_option("--seed", a.seed, "Override the config seed");

  auto* cal = app.add_subcommand("calibrate", "Self-calibrate node positions from optical sweeps");
  auto* syn = app.add_subcommand("sync", "Align recordings on the beacon trace");
  auto* loc = app.add_subcommand("localize", "TDOA source fix from aligned recordings");
  for (auto* s : {cal, syn, loc}) s->add_option("--out", a.out, "Run directory")->required();

  auto* srv = app.add_subcommand("serve", "Collect node streams over TCP");
  srv->add_option("--bind", a.bind, "ADDR:PORT")->required();
  srv->add_option("--out", a.out, "Directory for received recordings")->required();
  srv->add_option("--nodes", a.nodes, "Streams to wait for")->check(CLI::PositiveNumber);
  srv->add_option("--timeout", a.timeout, "Seconds to wait")->check(CLI::PositiveNumber);

  auto* node = app.add_subcommand("node", "Stream recording files to a collector");
  node->add_option("--connect", a.connect, "ADDR:PORT")->required();
  node->add_option("--file", a.files, "Recording file (repeatable)")->required();
  node->add_option("--rate-cap", a.rate_cap, "Bits per second");
  node->add_option("--chunk", a.chunk, "Samples per frame")->check(CLI::Range(8, 1 << 24));

  auto* demo = app.add_subcommand("demo", "Run every stage and print a pass/fail summary");
  demo->add_option("--config", a.config, "Experiment config (JSON)")->required();
  demo->add_option("--out", a.out, "Output directory");
  demo->add_option("--seed", a.seed, "Override the config seed");
  demo->add_option("--rate-cap", a.rate_cap, "Offload bits per second");

  auto* bat = app.add_subcommand("battery", "Runtime in hours from capacity and current");
  bat->add_option("--capacity", a.capacity, "mAh")->required();
  bat->add_option("--current", a.current, "mA")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*sim) {
      const auto c = configured(a);
      const auto out = out_dir(a, &c);
      cmd_simulate(c, out);
      std::cout << "simulate: wrote " << c.acquisition_ids().size() << " recordings to " << out.string() << "\n";
    } else if (*cal) {
      print(cmd_calibrate(a.out));
    } else if (*syn) {
      print(cmd_sync(a.out));
    } else if (*loc) {
      print(cmd_localize(a.out));
    } else if (*srv) {
      const auto s = cmd_serve(parse_endpoint(a.bind), a.out, a.nodes, a.timeout);
      print(s.stats);
    } else if (*node) {
      std::vector<fs::path> files(a.files.begin(), a.files.end());
      print(cmd_node(parse_endpoint(a.connect), files, a.rate_cap.value_or(kDefaultRateCap), a.chunk));
    } else if (*demo) {
      const auto c = configured(a);
      const auto out = out_dir(a, &c);
      const auto checks = cmd_demo(c, out);
      bool ok = true;
      for (const auto& ch : checks) {
        std::printf("[%s] %s: %s\n", ch.pass ? "PASS" : "FAIL", ch.name.c_str(), ch.detail.c_str());
        ok = ok && ch.pass;
      }
      std::printf("demo: %s (artifacts in %s)\n", ok ? "all checks passed" : "some checks failed", out.string().c_str());
      return ok ? 0 : 1;
    } else if (*bat) {
      std::printf("%.2f\n", battery_runtime(a.capacity, a.current));
    }
  } catch (const DependencyError& e) {
    std::fprintf(stderr, "error: stage '%s' required: %s\n", e.stage().c_str(), e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
  return 0;
}
