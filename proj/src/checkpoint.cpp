#include <bit>
#include <cstdio>
#include <fstream>

#include "fedmap/harness.hpp"

namespace fedmap {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint arrays are written little-endian");

namespace {

std::string round_stem(int round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round_%04d", round);
  return buf;
}

}  // namespace

void write_checkpoint(const fs::path& dir, const Checkpoint& cp) {
  fs::create_directories(dir);
  const std::string stem = round_stem(cp.round);
  json arrays = json::array();
  std::vector<const ParamVector*> blocks;
  Index offset = 0;
  auto add = [&](const std::string& name, const ParamVector& v) {
    arrays.push_back({{"name", name}, {"offset", offset}, {"length", v.size()}});
    offset += v.size();
    blocks.push_back(&v);
  };
  add("mu", cp.prior.mu);
  if (cp.prior.icnn) add("psi", cp.prior.icnn->values);
  for (std::size_t k = 0; k < cp.thetas.size(); ++k) add("theta/" + cp.site_ids[k], cp.thetas[k]);

  json header = {{"round", cp.round},
                 {"strategy", cp.strategy},
                 {"config_hash", cp.config_hash},
                 {"seed", cp.seed},
                 {"alpha", cp.prior.alpha},
                 {"epsilon", cp.prior.epsilon},
                 {"site_ids", cp.site_ids},
                 {"data", stem + ".bin"},
                 {"dtype", "f64le"},
                 {"arrays", arrays}};
  if (cp.prior.icnn)
    header["psi_shape"] = {{"input_dim", cp.prior.icnn->shape.input_dim}, {"widths", cp.prior.icnn->shape.widths}};

  std::ofstream bin(dir / (stem + ".bin"), std::ios::binary);
  for (const ParamVector* v : blocks)
    bin.write(reinterpret_cast<const char*>(v->data()), static_cast<std::streamsize>(v->size() * sizeof(double)));
  if (!bin) throw std::runtime_error("cannot write checkpoint data in " + dir.string());
  std::ofstream(dir / (stem + ".json"), std::ios::binary) << header.dump(2) << '\n';
}

Checkpoint read_checkpoint(const fs::path& header_path) {
  std::ifstream in(header_path);
  if (!in) throw std::runtime_error("cannot read " + header_path.string());
  const json h = json::parse(in);
  Checkpoint cp;
  cp.round = h.at("round").get<int>();
  cp.strategy = h.at("strategy").get<std::string>();
  cp.config_hash = h.at("config_hash").get<std::string>();
  cp.seed = h.at("seed").get<std::uint64_t>();
  cp.prior.alpha = h.at("alpha").get<double>();
  cp.prior.epsilon = h.at("epsilon").get<double>();
  cp.site_ids = h.at("site_ids").get<std::vector<std::string>>();

  std::ifstream bin(header_path.parent_path() / h.at("data").get<std::string>(), std::ios::binary);
  if (!bin) throw std::runtime_error("missing checkpoint data for " + header_path.string());
  auto read_block = [&](Index offset, Index length) {
    ParamVector v(length);
    bin.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
    bin.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(length * sizeof(double)));
    if (!bin) throw std::runtime_error("truncated checkpoint data for " + header_path.string());
    return v;
  };
  for (const auto& a : h.at("arrays")) {
    const std::string name = a.at("name").get<std::string>();
    ParamVector v = read_block(a.at("offset").get<Index>(), a.at("length").get<Index>());
    if (name == "mu") {
      cp.prior.mu = std::move(v);
    } else if (name == "psi") {
      IcnnParams psi;
      psi.shape.input_dim = h.at("psi_shape").at("input_dim").get<Index>();
      psi.shape.widths = h.at("psi_shape").at("widths").get<std::vector<Index>>();
      psi.values = std::move(v);
      cp.prior.icnn = std::move(psi);
    } else {
      cp.thetas.push_back(std::move(v));
    }
  }
  if (cp.thetas.size() != cp.site_ids.size()) throw std::runtime_error("checkpoint site list and arrays disagree");
  return cp;
}

}  // namespace fedmap
