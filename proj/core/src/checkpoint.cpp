#include "mdml/checkpoint.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "mdml/errors.hpp"

namespace mdml {

namespace {

constexpr const char* kMagic = "mdml-checkpoint";
constexpr int kVersion = 1;

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

double parse_hex(const std::string& token) {
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0') throw DataError("checkpoint: bad number '" + token + "'");
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const ModelState& state, const CheckpointInfo& info) {
  const ModelConfig& c = state.config();
  out << kMagic << ' ' << kVersion << '\n';
  out << "config_digest " << (info.config_digest.empty() ? "-" : info.config_digest) << '\n';
  out << "seed " << state.seed() << '\n';
  out << "input_dim " << c.input_dim << '\n';
  out << "latent_dim " << c.latent_dim << '\n';
  out << "hidden_dim " << c.hidden_dim << '\n';
  out << "residual_blocks " << c.n_residual_blocks << '\n';
  for (const Parameter* p : state.all_parameters()) {
    out << "param " << p->name << ' ' << p->value.rows() << ' ' << p->value.cols();
    for (double v : p->value.data()) out << ' ' << hex(v);
    out << '\n';
  }
  out << "end\n";
}

void write_checkpoint(const std::filesystem::path& path, const ModelState& state,
                      const CheckpointInfo& info) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  write_checkpoint(out, state, info);
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

ModelState read_checkpoint(std::istream& in, CheckpointInfo* info) {
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kMagic || version != kVersion) {
    throw DataError("checkpoint: unrecognised header");
  }
  std::map<std::string, std::string> scalars;
  std::map<std::string, ValueMatrix> buffers;
  std::string line;
  std::getline(in, line);
  bool ended = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key.empty()) continue;
    if (key == "end") {
      ended = true;
      break;
    }
    if (key == "param") {
      std::string name;
      std::size_t rows = 0, cols = 0;
      if (!(ls >> name >> rows >> cols)) throw DataError("checkpoint: malformed param line");
      std::vector<double> values;
      values.reserve(rows * cols);
      std::string tok;
      while (ls >> tok) values.push_back(parse_hex(tok));
      if (values.size() != rows * cols) throw DataError("checkpoint: wrong value count for " + name);
      buffers.emplace(name, ValueMatrix(rows, cols, std::move(values)));
    } else {
      std::string value;
      ls >> value;
      scalars[key] = value;
    }
  }
  if (!ended) throw DataError("checkpoint: truncated file");

  auto get = [&](const char* key) -> std::uint64_t {
    auto it = scalars.find(key);
    if (it == scalars.end()) throw DataError(std::string("checkpoint: missing ") + key);
    std::uint64_t v = 0;
    const auto& s = it->second;
    if (std::from_chars(s.data(), s.data() + s.size(), v).ec != std::errc{}) {
      throw DataError(std::string("checkpoint: bad value for ") + key);
    }
    return v;
  };
  ModelConfig config;
  config.input_dim = get("input_dim");
  config.latent_dim = get("latent_dim");
  config.hidden_dim = get("hidden_dim");
  config.n_residual_blocks = get("residual_blocks");
  ModelState state = ModelState::initialize(config, get("seed"));
  for (Parameter* p : state.all_parameters()) {
    auto it = buffers.find(p->name);
    if (it == buffers.end()) throw DataError("checkpoint: missing parameter " + p->name);
    if (!it->second.same_shape(p->value)) throw DataError("checkpoint: shape mismatch for " + p->name);
    p->value = std::move(it->second);
    buffers.erase(it);
  }
  if (!buffers.empty()) throw DataError("checkpoint: unknown parameter " + buffers.begin()->first);
  if (info) {
    info->config_digest = scalars["config_digest"] == "-" ? "" : scalars["config_digest"];
  }
  return state;
}

ModelState read_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  return read_checkpoint(in, info);
}

}  // namespace mdml
