#include "groundcap/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace groundcap {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

const Matrix& CheckpointData::array(const std::string& name) const {
  for (const auto& [n, m] : arrays) {
    if (n == name) return m;
  }
  throw CheckpointError("checkpoint has no array named " + name);
}

bool CheckpointData::has(const std::string& name) const {
  for (const auto& entry : arrays) {
    if (entry.first == name) return true;
  }
  return false;
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_checkpoint(const fs::path& path, const CheckpointData& data) {
  json header = data.header;
  json arrays = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : data.arrays) {
    arrays.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  header["arrays"] = arrays;
  const std::string text = header.dump();

  std::string blob = "GCAP";
  auto put = [&blob](const void* p, size_t n) { blob.append(static_cast<const char*>(p), n); };
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  put(&version, sizeof version);
  put(&len, sizeof len);
  blob += text;
  for (const auto& entry : data.arrays) {
    // Column-major storage is converted to row-major on disk.
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = entry.second;
    put(rm.data(), static_cast<size_t>(rm.size()) * sizeof(double));
  }
  write_file_atomic(path, blob);
}

CheckpointData read_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  const std::string blob = read_file(path);
  if (blob.size() < 16 || blob.compare(0, 4, "GCAP") != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  std::uint32_t version;
  std::uint64_t len;
  std::memcpy(&version, blob.data() + 4, sizeof version);
  std::memcpy(&len, blob.data() + 8, sizeof len);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
  if (16 + len > blob.size()) throw CheckpointError("truncated checkpoint header");
  CheckpointData data;
  data.header = json::parse(blob.substr(16, len));
  const size_t base = 16 + len;
  for (const auto& a : data.header.at("arrays")) {
    const auto rows = a.at("rows").get<Eigen::Index>();
    const auto cols = a.at("cols").get<Eigen::Index>();
    const auto off = a.at("offset").get<std::uint64_t>();
    const size_t bytes = static_cast<size_t>(rows * cols) * sizeof(double);
    if (base + off + bytes > blob.size()) throw CheckpointError("truncated checkpoint payload");
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    std::memcpy(rm.data(), blob.data() + base + off, bytes);
    data.arrays.emplace_back(a.at("name").get<std::string>(), Matrix(rm));
  }
  return data;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::string file_sha256(const fs::path& path) { return sha256_hex(read_file(path)); }

}  // namespace groundcap
