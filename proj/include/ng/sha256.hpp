#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ng {

// Incremental SHA-256; used for content-addressed stage caching and
// manifest integrity digests.
class Sha256 {
public:
  Sha256();
  void update(const void* data, size_t len);
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::string hex_digest();  // finalizes; further updates are invalid

  static std::string of_string(std::string_view s);
  static std::string of_file(const std::string& path);  // throws on open failure
  static std::string of_doubles(const std::vector<double>& v);

private:
  void process_block(const uint8_t* block);
  uint32_t h_[8];
  uint8_t buf_[64];
  size_t buf_len_ = 0;
  uint64_t total_ = 0;
  bool finalized_ = false;
};

}  // namespace ng
