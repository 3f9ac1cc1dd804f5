#include "headlab/checkpoint.hpp"

#include "headlab/io_util.hpp"

#include <stdexcept>

namespace headlab {
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
// "HLCK" little-endian
constexpr std::uint32_t kCheckpointMagic = 'H' | 'L' << 8 | 'C' << 16 | 'K' << 24;

}  // namespace

void save_checkpoint(const ParameterStore& params, const std::string& meta_json,
                     const std::string& path) {
  ByteWriter w;
  w.str(meta_json);
  w.u32(static_cast<std::uint32_t>(params.all().size()));
  for (const auto& p : params.all()) {
    w.str(p->name);
    w.u32(static_cast<std::uint32_t>(p->value.rank()));
    for (Eigen::Index d : p->value.shape()) w.u64(static_cast<std::uint64_t>(d));
    w.f64_array(p->value.data(), static_cast<size_t>(p->value.size()));
  }

  ByteWriter file;
  file.u32(kCheckpointMagic);
  file.u32(kCheckpointVersion);
  const auto& payload = w.bytes();
  file.u64(payload.size());
  std::vector<std::byte> all = file.bytes();
  all.insert(all.end(), payload.begin(), payload.end());
  ByteWriter tail;
  tail.u64(fnv1a64(payload));
  all.insert(all.end(), tail.bytes().begin(), tail.bytes().end());
  write_file_bytes(path, all);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::vector<std::byte> all = read_file_bytes(path);
  if (all.size() < 24) throw std::runtime_error("checkpoint truncated");
  ByteReader head(all);
  if (head.u32() != kCheckpointMagic)
    throw std::runtime_error("not a checkpoint file: " + path);
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  const std::uint64_t payload_len = head.u64();
  if (all.size() != 16 + payload_len + 8)
    throw std::runtime_error("checkpoint truncated");
  const std::span<const std::byte> payload(all.data() + 16, payload_len);
  ByteReader tail(std::span(all.data() + 16 + payload_len, 8));
  if (fnv1a64(payload) != tail.u64())
    throw std::runtime_error("checkpoint checksum mismatch");

  ByteReader r(payload);
  LoadedCheckpoint out;
  out.meta_json = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    out.names.push_back(r.str());
    const std::uint32_t rank = r.u32();
    std::vector<Eigen::Index> shape(rank);
    for (auto& d : shape) d = static_cast<Eigen::Index>(r.u64());
    Tensor t = Tensor::zeros(shape);
    r.f64_array(t.data(), static_cast<size_t>(t.size()));
    out.tensors.push_back(std::move(t));
  }
  if (!r.exhausted()) throw std::runtime_error("checkpoint has trailing bytes");
  return out;
}

void restore_parameters(const LoadedCheckpoint& ckpt, ParameterStore& params) {
  if (ckpt.names.size() != params.all().size())
    throw std::runtime_error("checkpoint does not match model: parameter count");
  for (size_t i = 0; i < ckpt.names.size(); ++i) {
    Parameter* p = params.find(ckpt.names[i]);
    if (p == nullptr)
      throw std::runtime_error("checkpoint does not match model: missing " +
                               ckpt.names[i]);
    if (!p->value.same_shape(ckpt.tensors[i]))
      throw std::runtime_error("checkpoint does not match model: shape of " +
                               ckpt.names[i]);
    p->value = ckpt.tensors[i];
  }
}

}  // namespace headlab
