#pragma once

// Self-describing binary model checkpoint: config header, then every
// parameter tensor in visit order with shape headers and little-endian
// 64-bit float payloads. The writer is deterministic, so load + save
// reproduces a file byte for byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "drift/errors.hpp"
#include "drift/model.hpp"

namespace drift {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads assume a little-endian host");

namespace detail {

constexpr char kCheckpointMagic[8] = {'D', 'R', 'I', 'F', 'T', 'C', 'K', '1'};

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw ParseError(std::string("checkpoint: truncated reading ") + what);
  }
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const char* what) {
  const std::uint32_t n = read_u32(in, what);
  if (n > 4096) throw ParseError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) {
    throw ParseError(std::string("checkpoint: truncated reading ") + what);
  }
  return s;
}

}  // namespace detail

inline void save_model(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("save_model: cannot open " + path);
  out.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  detail::write_u32(out, 1);  // format version

  const ModelConfig& c = params.config;
  detail::write_u32(out, static_cast<std::uint32_t>(c.vocab_size));
  detail::write_u32(out, static_cast<std::uint32_t>(c.d_model));
  detail::write_u32(out, static_cast<std::uint32_t>(c.n_layers));
  detail::write_u32(out, static_cast<std::uint32_t>(c.n_heads));
  detail::write_u32(out, static_cast<std::uint32_t>(c.d_ff));
  detail::write_u32(out, static_cast<std::uint32_t>(c.max_seq_len));
  detail::write_u32(out, c.pooling == Pooling::final_token ? 0u : 1u);
  detail::write_u32(out, static_cast<std::uint32_t>(c.probed_layers.size()));
  for (int l : c.probed_layers) {
    detail::write_u32(out, static_cast<std::uint32_t>(l));
  }

  std::uint32_t n_tensors = 0;
  visit_params(params, [&](const std::string&, const Tensor&) { ++n_tensors; });
  detail::write_u32(out, n_tensors);
  visit_params(params, [&](const std::string& name, const Tensor& t) {
    detail::write_string(out, name);
    detail::write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::write_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  });
  if (!out) throw InputError("save_model: write failed for " + path);
}

inline ModelParams load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("load_model: cannot open " + path);
  char magic[8];
  if (!in.read(magic, sizeof magic) ||
      std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) != 0) {
    throw ParseError("load_model: bad magic in " + path);
  }
  const std::uint32_t version = detail::read_u32(in, "version");
  if (version != 1) {
    throw ParseError("load_model: unsupported checkpoint version " +
                     std::to_string(version));
  }

  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(detail::read_u32(in, "vocab_size"));
  cfg.d_model = static_cast<int>(detail::read_u32(in, "d_model"));
  cfg.n_layers = static_cast<int>(detail::read_u32(in, "n_layers"));
  cfg.n_heads = static_cast<int>(detail::read_u32(in, "n_heads"));
  cfg.d_ff = static_cast<int>(detail::read_u32(in, "d_ff"));
  cfg.max_seq_len = static_cast<int>(detail::read_u32(in, "max_seq_len"));
  cfg.pooling = detail::read_u32(in, "pooling") == 0 ? Pooling::final_token
                                                     : Pooling::mean;
  cfg.probed_layers.clear();
  const std::uint32_t n_probed = detail::read_u32(in, "probed count");
  for (std::uint32_t i = 0; i < n_probed; ++i) {
    cfg.probed_layers.push_back(
        static_cast<int>(detail::read_u32(in, "probed layer")));
  }
  cfg.validate();

  ModelParams params = init_params(cfg, 0);
  const std::uint32_t n_tensors = detail::read_u32(in, "tensor count");
  std::uint32_t consumed = 0;
  visit_params(params, [&](const std::string& name, Tensor& t) {
    const std::string got = detail::read_string(in, "tensor name");
    if (got != name) {
      throw ParseError("load_model: expected tensor '" + name + "', found '" +
                       got + "'");
    }
    const std::uint32_t rank = detail::read_u32(in, "rank");
    std::vector<int> shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(static_cast<int>(detail::read_u32(in, "dim")));
    }
    if (shape != t.shape) {
      throw ParseError("load_model: shape mismatch for tensor '" + name + "'");
    }
    if (!in.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)))) {
      throw ParseError("load_model: truncated payload for '" + name + "'");
    }
    ++consumed;
  });
  if (consumed != n_tensors) {
    throw ParseError("load_model: tensor count mismatch");
  }
  if (!all_finite(params.tok_emb)) {
    throw ParseError("load_model: non-finite embedding payload");
  }
  return params;
}

}  // namespace drift
