#include "l2p/io.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "l2p/errors.hpp"

namespace l2p {

namespace fs = std::filesystem;

bool file_exists(const std::string& path) {
  std::error_code ec;
  return fs::exists(fs::path(path), ec);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw DatasetError("read failed for " + path);
  return buf.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
    if (ec) throw DatasetError("cannot create directory " + target.parent_path().string());
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError("cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    if (!out) throw DatasetError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw DatasetError("rename failed for " + path + ": " + ec.message());
}

}  // namespace l2p
