// Copyright 2025 The podpilot Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Archive extraction for staged inputs. Task inputs come from untrusted
// submitters, so every entry name is validated before a single byte is
// written: absolute paths, ".." traversal, and link entries are rejected
// up front (the whole archive is scanned first, then extracted). Tar files
// are read through zlib's gz layer, which transparently handles both plain
// and gzip-compressed streams, so .tar, .tar.gz and .tgz share one path.

#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <zlib.h>

#include "podpilot/error.hpp"
#include "podpilot/model.hpp"

namespace podpilot {

enum class ArchiveKind { None, Tar, Zip };

inline ArchiveKind detect_archive_kind(std::string_view filename) {
  auto ends_with = [&](std::string_view suffix) {
    return filename.size() > suffix.size() &&
           filename.substr(filename.size() - suffix.size()) == suffix;
  };
  if (ends_with(".tar") || ends_with(".tar.gz") || ends_with(".tgz")) {
    return ArchiveKind::Tar;
  }
  if (ends_with(".zip")) return ArchiveKind::Zip;
  return ArchiveKind::None;
}

namespace detail {

inline void validate_entry_name(const std::string& raw_name, bool is_directory) {
  std::string name = raw_name;
  if (is_directory && !name.empty() && name.back() == '/') name.pop_back();
  if (name.find('\\') != std::string::npos) {
    throw StagingError("archive entry has backslash in name: '" + raw_name + "'");
  }
  if (!is_safe_relative_path(name)) {
    throw StagingError("archive entry escapes destination: '" + raw_name + "'");
  }
}

inline std::filesystem::path entry_dest(const std::filesystem::path& dest_dir,
                                        const std::string& raw_name) {
  std::string name = raw_name;
  while (!name.empty() && name.back() == '/') name.pop_back();
  return dest_dir / std::filesystem::path(name);
}

// -- tar ---------------------------------------------------------------

constexpr std::size_t kTarBlock = 512;

struct TarEntry {
  std::string name;
  char type = '0';
  std::uint64_t size = 0;
  std::uint32_t mode = 0644;
};

inline std::uint64_t parse_tar_number(const char* field, std::size_t width) {
  // GNU base-256 extension: high bit of the first byte set.
  if (static_cast<unsigned char>(field[0]) & 0x80) {
    std::uint64_t value = static_cast<unsigned char>(field[0]) & 0x7f;
    for (std::size_t i = 1; i < width; ++i) {
      value = (value << 8) | static_cast<unsigned char>(field[i]);
    }
    return value;
  }
  std::uint64_t value = 0;
  std::size_t i = 0;
  while (i < width && (field[i] == ' ' || field[i] == '\0')) ++i;
  for (; i < width && field[i] >= '0' && field[i] <= '7'; ++i) {
    value = value * 8 + static_cast<std::uint64_t>(field[i] - '0');
  }
  return value;
}

/// Sequential reader over a (possibly gzipped) tar stream. `next()` skips
/// any unread data of the previous entry, so callers may consume entries
/// without touching their payloads.
class TarReader {
 public:
  explicit TarReader(const std::filesystem::path& path)
      : file_(gzopen(path.c_str(), "rb")) {
    if (file_ == nullptr) throw StagingError("cannot open archive " + path.string());
  }
  ~TarReader() {
    if (file_ != nullptr) gzclose(file_);
  }
  TarReader(const TarReader&) = delete;
  TarReader& operator=(const TarReader&) = delete;

  std::optional<TarEntry> next() {
    skip_data();
    std::string pending_long_name;
    for (;;) {
      std::array<char, kTarBlock> block{};
      const int got = gzread(file_, block.data(), kTarBlock);
      if (got == 0) return std::nullopt;
      if (got != static_cast<int>(kTarBlock)) {
        throw ParseError("truncated tar header");
      }
      bool all_zero = true;
      for (const char c : block) {
        if (c != '\0') {
          all_zero = false;
          break;
        }
      }
      if (all_zero) return std::nullopt;
      verify_checksum(block);

      TarEntry entry;
      entry.type = block[156];
      entry.size = parse_tar_number(block.data() + 124, 12);
      entry.mode = static_cast<std::uint32_t>(parse_tar_number(block.data() + 100, 8));
      entry.name = header_name(block);

      if (entry.type == 'L') {
        pending_long_name = read_string_data(entry.size);
        continue;
      }
      if (entry.type == 'x' || entry.type == 'g') {
        // Extended metadata records; attributes are not applied, only the
        // data needs skipping.
        remaining_ = padded(entry.size);
        skip_data();
        continue;
      }
      if (!pending_long_name.empty()) {
        entry.name = pending_long_name;
        pending_long_name.clear();
      }
      remaining_ = padded(entry.size);
      current_size_ = entry.size;
      return entry;
    }
  }

  /// Streams the current entry's data to `dest`, creating parent directories.
  void extract_data_to(const std::filesystem::path& dest) {
    std::filesystem::create_directories(dest.parent_path());
    std::ofstream out(dest, std::ios::binary | std::ios::trunc);
    if (!out) throw StagingError("cannot create " + dest.string());
    std::uint64_t left = current_size_;
    std::array<char, 64 * 1024> buf;
    while (left > 0) {
      const auto want = static_cast<unsigned>(std::min<std::uint64_t>(left, buf.size()));
      const int got = gzread(file_, buf.data(), want);
      if (got <= 0) throw ParseError("truncated tar data for " + dest.string());
      out.write(buf.data(), got);
      left -= static_cast<std::uint64_t>(got);
      remaining_ -= static_cast<std::uint64_t>(got);
    }
    out.flush();
    if (!out) throw StagingError("short write to " + dest.string());
    skip_data();
  }

 private:
  static std::uint64_t padded(std::uint64_t size) {
    return (size + kTarBlock - 1) / kTarBlock * kTarBlock;
  }

  static std::string header_name(const std::array<char, kTarBlock>& block) {
    const std::string name(block.data(), strnlen(block.data(), 100));
    const std::string prefix(block.data() + 345, strnlen(block.data() + 345, 155));
    if (prefix.empty()) return name;
    return prefix + "/" + name;
  }

  static void verify_checksum(const std::array<char, kTarBlock>& block) {
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < kTarBlock; ++i) {
      sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(block[i]);
    }
    const std::uint64_t stored = parse_tar_number(block.data() + 148, 8);
    if (sum != stored) throw ParseError("tar header checksum mismatch");
  }

  std::string read_string_data(std::uint64_t size) {
    if (size > 1 << 20) throw ParseError("oversized tar name record");
    std::string data(padded(size), '\0');
    const int got = gzread(file_, data.data(), static_cast<unsigned>(data.size()));
    if (got != static_cast<int>(data.size())) throw ParseError("truncated tar name record");
    data.resize(strnlen(data.c_str(), size));
    return data;
  }

  void skip_data() {
    std::array<char, 64 * 1024> buf;
    while (remaining_ > 0) {
      const auto want =
          static_cast<unsigned>(std::min<std::uint64_t>(remaining_, buf.size()));
      const int got = gzread(file_, buf.data(), want);
      if (got <= 0) throw ParseError("truncated tar data");
      remaining_ -= static_cast<std::uint64_t>(got);
    }
  }

  gzFile file_ = nullptr;
  std::uint64_t remaining_ = 0;
  std::uint64_t current_size_ = 0;
};

inline void validate_tar_entry(const TarEntry& entry) {
  if (entry.type == '1' || entry.type == '2') {
    throw StagingError("archive contains link entry: '" + entry.name + "'");
  }
  if (entry.type != '0' && entry.type != '\0' && entry.type != '5') {
    throw StagingError("archive entry '" + entry.name + "' has unsupported type");
  }
  validate_entry_name(entry.name, entry.type == '5');
}

inline std::vector<std::string> extract_tar(const std::filesystem::path& archive,
                                            const std::filesystem::path& dest_dir) {
  {
    TarReader scan(archive);
    while (auto entry = scan.next()) validate_tar_entry(*entry);
  }
  std::vector<std::string> extracted;
  TarReader reader(archive);
  std::filesystem::create_directories(dest_dir);
  while (auto entry = reader.next()) {
    const std::filesystem::path dest = entry_dest(dest_dir, entry->name);
    if (entry->type == '5') {
      std::filesystem::create_directories(dest);
    } else {
      reader.extract_data_to(dest);
      const bool exec = (entry->mode & 0111) != 0;
      std::filesystem::permissions(dest, exec ? std::filesystem::perms(0755)
                                              : std::filesystem::perms(0644));
      extracted.push_back(entry->name);
    }
  }
  return extracted;
}

// -- zip ---------------------------------------------------------------

struct ZipEntry {
  std::string name;
  std::uint16_t method = 0;
  std::uint16_t flags = 0;
  std::uint32_t crc = 0;
  std::uint64_t compressed_size = 0;
  std::uint64_t uncompressed_size = 0;
  std::uint64_t local_offset = 0;
  std::uint32_t external_attr = 0;
  std::uint16_t made_by = 0;

  bool is_directory() const { return !name.empty() && name.back() == '/'; }
  bool is_symlink() const {
    // Upper byte 3 of "made by" marks unix attributes; the high 16 bits of
    // external_attr then carry the st_mode.
    if ((made_by >> 8) != 3) return false;
    const std::uint32_t mode = external_attr >> 16;
    return (mode & 0170000) == 0120000;
  }
  std::uint32_t unix_mode() const {
    if ((made_by >> 8) != 3) return 0;
    return external_attr >> 16;
  }
};

inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<ZipEntry> read_zip_directory(std::ifstream& in,
                                                std::uint64_t file_size) {
  constexpr std::uint32_t kEocdSig = 0x06054b50;
  constexpr std::size_t kEocdMin = 22;
  if (file_size < kEocdMin) throw ParseError("zip file too small");
  const std::uint64_t tail_size = std::min<std::uint64_t>(file_size, kEocdMin + 65535);
  std::vector<unsigned char> tail(tail_size);
  in.seekg(static_cast<std::streamoff>(file_size - tail_size));
  in.read(reinterpret_cast<char*>(tail.data()), static_cast<std::streamsize>(tail_size));
  if (!in) throw ParseError("cannot read zip directory");

  std::optional<std::size_t> eocd_pos;
  for (std::size_t i = tail_size - kEocdMin + 1; i-- > 0;) {
    if (read_u32(tail.data() + i) == kEocdSig) {
      const std::uint16_t comment_len = read_u16(tail.data() + i + 20);
      if (i + kEocdMin + comment_len == tail_size) {
        eocd_pos = i;
        break;
      }
    }
  }
  if (!eocd_pos) throw ParseError("zip end-of-directory record not found");

  const unsigned char* eocd = tail.data() + *eocd_pos;
  const std::uint16_t total_entries = read_u16(eocd + 10);
  const std::uint32_t cd_size = read_u32(eocd + 12);
  const std::uint32_t cd_offset = read_u32(eocd + 16);
  if (total_entries == 0xffff || cd_offset == 0xffffffff || cd_size == 0xffffffff) {
    throw ParseError("zip64 archives are not supported");
  }
  if (static_cast<std::uint64_t>(cd_offset) + cd_size > file_size) {
    throw ParseError("zip directory extends past end of file");
  }

  std::vector<unsigned char> cd(cd_size);
  in.seekg(cd_offset);
  in.read(reinterpret_cast<char*>(cd.data()), static_cast<std::streamsize>(cd_size));
  if (!in) throw ParseError("cannot read zip directory");

  constexpr std::uint32_t kCentralSig = 0x02014b50;
  std::vector<ZipEntry> entries;
  std::size_t pos = 0;
  for (std::uint16_t n = 0; n < total_entries; ++n) {
    if (pos + 46 > cd.size() || read_u32(cd.data() + pos) != kCentralSig) {
      throw ParseError("corrupt zip directory entry");
    }
    const unsigned char* h = cd.data() + pos;
    ZipEntry entry;
    entry.made_by = read_u16(h + 4);
    entry.flags = read_u16(h + 8);
    entry.method = read_u16(h + 10);
    entry.crc = read_u32(h + 16);
    entry.compressed_size = read_u32(h + 20);
    entry.uncompressed_size = read_u32(h + 24);
    const std::uint16_t name_len = read_u16(h + 28);
    const std::uint16_t extra_len = read_u16(h + 30);
    const std::uint16_t comment_len = read_u16(h + 32);
    entry.external_attr = read_u32(h + 38);
    entry.local_offset = read_u32(h + 42);
    if (pos + 46 + name_len > cd.size()) throw ParseError("corrupt zip directory entry");
    entry.name.assign(reinterpret_cast<const char*>(h + 46), name_len);
    pos += 46u + name_len + extra_len + comment_len;
    entries.push_back(std::move(entry));
  }
  return entries;
}

inline void validate_zip_entry(const ZipEntry& entry) {
  if (entry.flags & 0x1) {
    throw StagingError("archive entry is encrypted: '" + entry.name + "'");
  }
  if (entry.is_symlink()) {
    throw StagingError("archive contains link entry: '" + entry.name + "'");
  }
  if (!entry.is_directory() && entry.method != 0 && entry.method != 8) {
    throw StagingError("archive entry '" + entry.name +
                       "' uses unsupported compression");
  }
  validate_entry_name(entry.name, entry.is_directory());
}

inline void extract_zip_entry(std::ifstream& in, const ZipEntry& entry,
                              const std::filesystem::path& dest) {
  constexpr std::uint32_t kLocalSig = 0x04034b50;
  std::array<unsigned char, 30> local{};
  in.seekg(static_cast<std::streamoff>(entry.local_offset));
  in.read(reinterpret_cast<char*>(local.data()), local.size());
  if (!in || read_u32(local.data()) != kLocalSig) {
    throw ParseError("corrupt zip local header for '" + entry.name + "'");
  }
  // Sizes and CRC in the local header may be deferred to a data descriptor;
  // the central directory values are authoritative either way.
  const std::uint16_t name_len = read_u16(local.data() + 26);
  const std::uint16_t extra_len = read_u16(local.data() + 28);
  in.seekg(static_cast<std::streamoff>(entry.local_offset) + 30 + name_len + extra_len);

  std::filesystem::create_directories(dest.parent_path());
  std::ofstream out(dest, std::ios::binary | std::ios::trunc);
  if (!out) throw StagingError("cannot create " + dest.string());

  std::uint32_t crc = crc32(0L, Z_NULL, 0);
  std::uint64_t written = 0;
  if (entry.method == 0) {
    std::uint64_t left = entry.compressed_size;
    std::array<char, 64 * 1024> buf;
    while (left > 0) {
      const auto want = static_cast<std::streamsize>(
          std::min<std::uint64_t>(left, buf.size()));
      in.read(buf.data(), want);
      if (in.gcount() != want) throw ParseError("truncated zip data for '" + entry.name + "'");
      out.write(buf.data(), want);
      crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()),
                  static_cast<uInt>(want));
      left -= static_cast<std::uint64_t>(want);
      written += static_cast<std::uint64_t>(want);
    }
  } else {
    z_stream zs{};
    if (inflateInit2(&zs, -15) != Z_OK) throw Error("inflate initialization failed");
    std::array<unsigned char, 64 * 1024> inbuf;
    std::array<unsigned char, 64 * 1024> outbuf;
    std::uint64_t comp_left = entry.compressed_size;
    int status = Z_OK;
    while (status != Z_STREAM_END) {
      if (zs.avail_in == 0) {
        if (comp_left == 0) {
          inflateEnd(&zs);
          throw ParseError("truncated zip data for '" + entry.name + "'");
        }
        const auto want = static_cast<std::streamsize>(
            std::min<std::uint64_t>(comp_left, inbuf.size()));
        in.read(reinterpret_cast<char*>(inbuf.data()), want);
        if (in.gcount() != want) {
          inflateEnd(&zs);
          throw ParseError("truncated zip data for '" + entry.name + "'");
        }
        comp_left -= static_cast<std::uint64_t>(want);
        zs.next_in = inbuf.data();
        zs.avail_in = static_cast<uInt>(want);
      }
      zs.next_out = outbuf.data();
      zs.avail_out = static_cast<uInt>(outbuf.size());
      status = inflate(&zs, Z_NO_FLUSH);
      if (status != Z_OK && status != Z_STREAM_END) {
        inflateEnd(&zs);
        throw ParseError("corrupt deflate stream in '" + entry.name + "'");
      }
      const std::size_t produced = outbuf.size() - zs.avail_out;
      out.write(reinterpret_cast<const char*>(outbuf.data()),
                static_cast<std::streamsize>(produced));
      crc = crc32(crc, outbuf.data(), static_cast<uInt>(produced));
      written += produced;
    }
    inflateEnd(&zs);
  }
  out.flush();
  if (!out) throw StagingError("short write to " + dest.string());
  if (written != entry.uncompressed_size) {
    throw ParseError("zip entry '" + entry.name + "' has wrong size");
  }
  if (crc != entry.crc) {
    throw ParseError("zip entry '" + entry.name + "' fails checksum");
  }
  const std::uint32_t mode = entry.unix_mode();
  const bool exec = (mode & 0111) != 0;
  std::filesystem::permissions(dest, exec ? std::filesystem::perms(0755)
                                          : std::filesystem::perms(0644));
}

inline std::vector<std::string> extract_zip(const std::filesystem::path& archive,
                                            const std::filesystem::path& dest_dir) {
  std::ifstream in(archive, std::ios::binary);
  if (!in) throw StagingError("cannot open archive " + archive.string());
  std::error_code ec;
  const std::uint64_t file_size = std::filesystem::file_size(archive, ec);
  if (ec) throw StagingError("cannot stat archive " + archive.string());

  const std::vector<ZipEntry> entries = read_zip_directory(in, file_size);
  for (const auto& entry : entries) validate_zip_entry(entry);

  std::filesystem::create_directories(dest_dir);
  std::vector<std::string> extracted;
  for (const auto& entry : entries) {
    const std::filesystem::path dest = entry_dest(dest_dir, entry.name);
    if (entry.is_directory()) {
      std::filesystem::create_directories(dest);
      continue;
    }
    extract_zip_entry(in, entry, dest);
    extracted.push_back(entry.name);
  }
  return extracted;
}

}  // namespace detail

/// Extracts `archive` into `dest_dir`, choosing the format from the file
/// name. Every entry is validated before extraction begins; on rejection
/// nothing has been written. Returns the relative names of extracted files.
inline std::vector<std::string> extract_archive(const std::filesystem::path& archive,
                                                const std::filesystem::path& dest_dir) {
  switch (detect_archive_kind(archive.filename().string())) {
    case ArchiveKind::Tar:
      return detail::extract_tar(archive, dest_dir);
    case ArchiveKind::Zip:
      return detail::extract_zip(archive, dest_dir);
    case ArchiveKind::None:
      break;
  }
  throw StagingError("unrecognized archive format: " + archive.filename().string());
}

}  // namespace podpilot
