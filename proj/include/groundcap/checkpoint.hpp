#ifndef GROUNDCAP_CHECKPOINT_HPP_
#define GROUNDCAP_CHECKPOINT_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundcap/linalg.hpp"

namespace groundcap {

// Container layout: "GCAP", u32 version, u64 header length, JSON header,
// then every array as little-endian float64 in header order. The header
// lists {name, rows, cols, offset} for each array.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointData {
  nlohmann::json header;  // caller fields plus "arrays"
  std::vector<std::pair<std::string, Matrix>> arrays;

  const Matrix& array(const std::string& name) const;
  bool has(const std::string& name) const;
};

// Writes to a temporary sibling and renames it into place.
void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

// Atomic text write (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

// Parameter records <-> named arrays.
template <class P>
void append_params(const P& params, const std::string& prefix, CheckpointData& data) {
  for (const auto& [name, m] : params.tensors()) data.arrays.emplace_back(prefix + name, *m);
}

template <class P>
void load_params(const CheckpointData& data, const std::string& prefix, P& params) {
  for (auto& [name, m] : params.tensors()) {
    const Matrix& src = data.array(prefix + name);
    if (src.rows() != m->rows() || src.cols() != m->cols()) {
      throw CheckpointError("array " + prefix + name + " has an unexpected shape");
    }
    *m = src;
  }
}

}  // namespace groundcap

#endif  // GROUNDCAP_CHECKPOINT_HPP_
