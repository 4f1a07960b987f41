#pragma once

// Parameter files: one line of JSON manifest, a newline, then every parameter
// block from the manifest's "blocks" list as little-endian IEEE-754 doubles.
// The manifest carries a CRC-32 of the binary block.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/crc.hpp>
#include <nlohmann/json.hpp>

#include "deeptamer/model.hpp"
#include "deeptamer/nn.hpp"

namespace dtamer {

class ParamFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ParamBlock {
  std::string name;
  std::vector<double> values;
};

struct ParamFile {
  nlohmann::json manifest;  // without blocks/checksum; those are derived
  std::vector<ParamBlock> blocks;

  const std::vector<double>& block(const std::string& name) const {
    for (const auto& b : blocks) {
      if (b.name == name) return b.values;
    }
    throw ParamFileError("parameter file has no block '" + name + "'");
  }
};

namespace detail {

inline std::string encode_le(const std::vector<ParamBlock>& blocks) {
  std::string out;
  for (const auto& b : blocks) {
    for (double v : b.values) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
  }
  return out;
}

inline std::uint32_t crc32(const std::string& bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

}  // namespace detail

inline void write_param_file(std::ostream& os, const ParamFile& file) {
  const std::string payload = detail::encode_le(file.blocks);
  nlohmann::json m = file.manifest;
  m["format"] = "deeptamer-params";
  m["version"] = 1;
  m["blocks"] = nlohmann::json::array();
  for (const auto& b : file.blocks) m["blocks"].push_back({{"name", b.name}, {"count", b.values.size()}});
  m["byte_order"] = "little";
  m["param_bytes"] = payload.size();
  m["checksum"] = detail::crc32(payload);
  os << m.dump() << '\n';
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw ParamFileError("failed writing parameter file");
}

inline ParamFile read_param_file(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParamFileError("parameter file is empty");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParamFileError(std::string("bad parameter manifest: ") + e.what());
  }
  if (m.value("format", "") != "deeptamer-params") throw ParamFileError("not a parameter file");
  if (m.value("version", 0) != 1) throw ParamFileError("unsupported parameter file version");
  const std::size_t nbytes = m.at("param_bytes").get<std::size_t>();
  std::string payload(nbytes, '\0');
  is.read(payload.data(), static_cast<std::streamsize>(nbytes));
  if (static_cast<std::size_t>(is.gcount()) != nbytes) {
    throw ParamFileError("parameter file truncated: expected " + std::to_string(nbytes) +
                         " bytes, got " + std::to_string(is.gcount()));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ParamFileError("trailing bytes after parameters");
  if (detail::crc32(payload) != m.at("checksum").get<std::uint32_t>()) {
    throw ParamFileError("parameter checksum mismatch");
  }
  ParamFile f;
  std::size_t offset = 0;
  for (const auto& bj : m.at("blocks")) {
    ParamBlock b;
    b.name = bj.at("name").get<std::string>();
    const std::size_t count = bj.at("count").get<std::size_t>();
    if (offset + count * 8 > nbytes) throw ParamFileError("manifest block sizes exceed payload");
    b.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[offset + 8 * i + k]))
                << (8 * k);
      }
      b.values[i] = std::bit_cast<double>(bits);
    }
    offset += count * 8;
    f.blocks.push_back(std::move(b));
  }
  if (offset != nbytes) throw ParamFileError("manifest block sizes do not cover payload");
  for (const char* k : {"format", "version", "blocks", "byte_order", "param_bytes", "checksum"}) {
    m.erase(k);
  }
  f.manifest = std::move(m);
  return f;
}

inline void save_param_file(const std::string& path, const ParamFile& file) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParamFileError("cannot open " + path + " for writing");
  write_param_file(os, file);
}

inline ParamFile load_param_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParamFileError("cannot open parameter file " + path);
  return read_param_file(is);
}

inline void assign_params(nn::Network& net, const std::vector<double>& values,
                          const std::string& what) {
  if (values.size() != net.param_count()) {
    throw ParamFileError(what + ": manifest has " + std::to_string(values.size()) +
                         " parameters, architecture needs " + std::to_string(net.param_count()));
  }
  net.params() = values;
}

// Model <-> ParamFile.

inline ParamFile to_param_file(const LinearPerActionModel& m, std::uint64_t seed = 0) {
  return ParamFile{{{"architecture", m.architecture()}, {"seed", seed}},
                   {{"weights", m.parameters()}}};
}

inline ParamFile to_param_file(const DeepRewardModel& m, std::uint64_t seed = 0) {
  return ParamFile{{{"architecture", m.architecture()}, {"seed", seed}},
                   {{"encoder", m.encoder().params()}, {"head", m.head().params()}}};
}

inline ParamFile encoder_param_file(const nn::Network& encoder, const nn::Network* decoder,
                                    const EncoderConfig& cfg, std::uint64_t seed = 0) {
  nlohmann::json arch = {{"kind", "encoder"},
                         {"encoder_config", cfg.to_json()},
                         {"encoder", encoder.architecture()}};
  ParamFile f{{{"architecture", arch}, {"seed", seed}}, {{"encoder", encoder.params()}}};
  if (decoder) {
    f.manifest["architecture"]["decoder"] = decoder->architecture();
    f.blocks.push_back({"decoder", decoder->params()});
  }
  return f;
}

inline std::string model_kind(const ParamFile& f) {
  return f.manifest.at("architecture").at("kind").get<std::string>();
}

inline LinearPerActionModel linear_from_param_file(const ParamFile& f) {
  auto m = LinearPerActionModel::from_architecture(f.manifest.at("architecture"));
  const auto& w = f.block("weights");
  if (w.size() != m.parameters().size()) throw ParamFileError("linear weights size mismatch");
  m.parameters() = w;
  return m;
}

inline nn::Network encoder_from_param_file(const ParamFile& f) {
  const auto& arch = f.manifest.at("architecture");
  const std::string kind = arch.at("kind").get<std::string>();
  if (kind != "encoder" && kind != "deep") {
    throw ParamFileError("file holds a '" + kind + "' model, not an encoder");
  }
  auto enc = nn::Network::from_architecture(arch.at("encoder"));
  assign_params(enc, f.block("encoder"), "encoder");
  return enc;
}

inline DeepRewardModel deep_from_param_file(const ParamFile& f) {
  const auto& arch = f.manifest.at("architecture");
  if (arch.at("kind") != "deep") throw ParamFileError("not a deep reward model file");
  auto enc = nn::Network::from_architecture(arch.at("encoder"));
  auto head = nn::Network::from_architecture(arch.at("head"));
  assign_params(enc, f.block("encoder"), "encoder");
  assign_params(head, f.block("head"), "head");
  return DeepRewardModel(std::move(enc), std::move(head));
}

// Rejects a model whose action count differs from the environment's.
inline void check_action_count(const ParamFile& f, int env_actions) {
  const auto& arch = f.manifest.at("architecture");
  if (arch.contains("num_actions") && arch.at("num_actions").get<int>() != env_actions) {
    throw ParamFileError("parameter file has " + std::to_string(arch.at("num_actions").get<int>()) +
                         " actions, environment has " + std::to_string(env_actions));
  }
}

}  // namespace dtamer
