#pragma once

// XMF1 checkpoint files: "XMF1", u32 version, then tensor records
//   u32 name_len, name bytes, u32 rank, u32 dims[rank], f64 values[]
// until end of file. Everything little-endian.

#include <cstdint>
#include <filesystem>
#include <string>

#include "vlpa/encoders.hpp"
#include "vlpa/io.hpp"

namespace vlpa {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const ParamSet& params) {
  std::string out = "XMF1";
  io::put_le<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& [name, t] : params.items()) {
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) io::put_le(out, v);
  }
  return out;
}

inline ParamSet decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != "XMF1") throw ConfigError("checkpoint: bad magic");
  std::size_t pos = 4;
  const auto version = io::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
  ParamSet ps;
  while (pos < bytes.size()) {
    const auto n = io::get_le<std::uint32_t>(bytes, pos);
    if (pos + n > bytes.size()) throw ConfigError("checkpoint: truncated name");
    std::string name(bytes.substr(pos, n));
    pos += n;
    const auto rank = io::get_le<std::uint32_t>(bytes, pos);
    Shape shape(rank);
    for (auto& d : shape) d = io::get_le<std::uint32_t>(bytes, pos);
    std::vector<double> values(numel(shape));
    for (double& v : values) v = io::get_le<double>(bytes, pos);
    ps.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return ps;
}

inline void save_checkpoint(const std::filesystem::path& p, const ParamSet& params) {
  io::write_file(p, encode_checkpoint(params));
}

inline ParamSet load_checkpoint(const std::filesystem::path& p) { return decode_checkpoint(io::read_file(p)); }

// Model metadata lives next to the weights as "meta.*" scalars.

namespace detail {
inline void put_meta(ParamSet& ps, const std::string& key, double v) {
  ps.add("meta." + key, Tensor(Shape{1}, std::vector<double>{v}));
}
inline double get_meta(const ParamSet& ps, const std::string& key) { return ps.at("meta." + key).item(); }
inline ParamSet strip_meta(const ParamSet& ps) {
  ParamSet out;
  for (const auto& [n, t] : ps.items())
    if (n.rfind("meta.", 0) != 0) out.add(n, t);
  return out;
}
template <class Model>
void check_layout(const Model& fresh, const ParamSet& loaded, const char* what) {
  const auto& want = fresh.params.items();
  const auto& got = loaded.items();
  if (want.size() != got.size()) throw ConfigError(std::string(what) + ": parameter count mismatch");
  for (std::size_t i = 0; i < want.size(); ++i)
    if (want[i].first != got[i].first || want[i].second.shape() != got[i].second.shape())
      throw ConfigError(std::string(what) + ": unexpected tensor '" + got[i].first + "' " +
                        shape_str(got[i].second.shape()));
}
}  // namespace detail

inline void save_dual_encoder(const std::filesystem::path& p, const DualEncoder& m) {
  ParamSet ps;
  detail::put_meta(ps, "embed_dim", static_cast<double>(m.config.embed_dim));
  detail::put_meta(ps, "token_dim", static_cast<double>(m.config.token_dim));
  detail::put_meta(ps, "width", static_cast<double>(m.config.width));
  detail::put_meta(ps, "window", static_cast<double>(m.config.window));
  detail::put_meta(ps, "pooling", m.config.pooling == Pooling::kMean ? 0.0 : 1.0);
  detail::put_meta(ps, "arch_seed", static_cast<double>(m.config.arch_seed));
  for (const auto& [n, t] : m.params.items()) ps.add(n, t);
  save_checkpoint(p, ps);
}

inline DualEncoder load_dual_encoder(const std::filesystem::path& p) {
  ParamSet ps = load_checkpoint(p);
  DualEncoderConfig cfg;
  cfg.embed_dim = static_cast<std::size_t>(detail::get_meta(ps, "embed_dim"));
  cfg.token_dim = static_cast<std::size_t>(detail::get_meta(ps, "token_dim"));
  cfg.width = static_cast<std::size_t>(detail::get_meta(ps, "width"));
  cfg.window = static_cast<std::size_t>(detail::get_meta(ps, "window"));
  cfg.pooling = detail::get_meta(ps, "pooling") == 0.0 ? Pooling::kMean : Pooling::kMax;
  cfg.arch_seed = static_cast<std::uint64_t>(detail::get_meta(ps, "arch_seed"));
  DualEncoder m{cfg, detail::strip_meta(ps)};
  detail::check_layout(make_dual_encoder(cfg), m.params, "load_dual_encoder");
  return m;
}

inline void save_causal_lm(const std::filesystem::path& p, const CausalLM& lm) {
  ParamSet ps;
  detail::put_meta(ps, "token_dim", static_cast<double>(lm.config.token_dim));
  detail::put_meta(ps, "hidden", static_cast<double>(lm.config.hidden));
  detail::put_meta(ps, "seed", static_cast<double>(lm.config.seed));
  for (const auto& [n, t] : lm.params.items()) ps.add(n, t);
  save_checkpoint(p, ps);
}

inline CausalLM load_causal_lm(const std::filesystem::path& p) {
  ParamSet ps = load_checkpoint(p);
  CausalLMConfig cfg;
  cfg.token_dim = static_cast<std::size_t>(detail::get_meta(ps, "token_dim"));
  cfg.hidden = static_cast<std::size_t>(detail::get_meta(ps, "hidden"));
  cfg.seed = static_cast<std::uint64_t>(detail::get_meta(ps, "seed"));
  CausalLM lm{cfg, detail::strip_meta(ps)};
  detail::check_layout(make_causal_lm(cfg), lm.params, "load_causal_lm");
  return lm;
}

inline void save_contextual_embedder(const std::filesystem::path& p, const ContextualEmbedder& e) {
  ParamSet ps;
  detail::put_meta(ps, "token_dim", static_cast<double>(e.config.token_dim));
  detail::put_meta(ps, "out_dim", static_cast<double>(e.config.out_dim));
  detail::put_meta(ps, "seed", static_cast<double>(e.config.seed));
  for (const auto& [n, t] : e.params.items()) ps.add(n, t);
  save_checkpoint(p, ps);
}

inline ContextualEmbedder load_contextual_embedder(const std::filesystem::path& p) {
  ParamSet ps = load_checkpoint(p);
  ContextualEmbedderConfig cfg;
  cfg.token_dim = static_cast<std::size_t>(detail::get_meta(ps, "token_dim"));
  cfg.out_dim = static_cast<std::size_t>(detail::get_meta(ps, "out_dim"));
  cfg.seed = static_cast<std::uint64_t>(detail::get_meta(ps, "seed"));
  ContextualEmbedder e{cfg, detail::strip_meta(ps)};
  detail::check_layout(make_contextual_embedder(cfg), e.params, "load_contextual_embedder");
  return e;
}

}  // namespace vlpa
