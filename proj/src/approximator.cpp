#include "stm/approximator.hpp"

#include "stm/errors.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace stm {

namespace {

constexpr std::array<char, 4> kMagic{'S', 'T', 'M', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T value) {
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) throw IoError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void save_params(const std::string& path, const ThetaParams& params) {
  validate(params);
  if (!params.weights.allFinite()) throw NumericError("refusing to save non-finite parameters");
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + tmp + "'");
    out.write(kMagic.data(), kMagic.size());
    put_le<std::uint32_t>(out, kVersion);
    put_le<std::uint32_t>(out, params.head_mode == HeadMode::per_action ? 0u : 1u);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.layer_sizes.size()));
    for (int n : params.layer_sizes) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(n));
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(params.weights.size()));
    for (Eigen::Index i = 0; i < params.weights.size(); ++i) put_le<double>(out, params.weights(i));
    if (!out.flush()) throw IoError("failed writing checkpoint '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

ThetaParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw IoError("'" + path + "' is not a checkpoint");
  if (get_le<std::uint32_t>(in) != kVersion) throw IoError("unsupported checkpoint version");
  ThetaParams p;
  const auto mode = get_le<std::uint32_t>(in);
  if (mode > 1) throw IoError("bad head mode in checkpoint");
  p.head_mode = mode == 0 ? HeadMode::per_action : HeadMode::single_head;
  const auto layers = get_le<std::uint32_t>(in);
  if (layers < 2 || layers > 64) throw IoError("bad layer count in checkpoint");
  for (std::uint32_t i = 0; i < layers; ++i) p.layer_sizes.push_back(static_cast<int>(get_le<std::uint32_t>(in)));
  const auto count = get_le<std::uint64_t>(in);
  for (int n : p.layer_sizes)
    if (n <= 0) throw IoError("bad layer size in checkpoint");
  if (static_cast<Eigen::Index>(count) != parameter_count(p.layer_sizes))
    throw IoError("checkpoint parameter count does not match its layer sizes");
  p.weights.resize(static_cast<Eigen::Index>(count));
  for (Eigen::Index i = 0; i < p.weights.size(); ++i) p.weights(i) = get_le<double>(in);
  if (!p.weights.allFinite()) throw IoError("checkpoint contains non-finite parameters");
  validate(p);
  return p;
}

}  // namespace stm
