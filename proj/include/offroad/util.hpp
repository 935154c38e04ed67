#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace offroad {

/// Number of worker threads used by parallel_for. Defaults to the value of
/// the OFFROAD_THREADS environment variable, or hardware concurrency.
int thread_count();
void set_thread_count(int n);

/// Runs fn(i) for i in [0, n). Work is split into contiguous index ranges so
/// that any per-index output is written to a caller-owned slot; callers that
/// need a reduction must combine slots in index order afterwards.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// FNV-1a 64-bit, used for artifact provenance hashes.
std::uint64_t fnv1a(const void* data, std::size_t len);
std::uint64_t fnv1a(const std::string& s);
std::string hash_hex(std::uint64_t h);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);
std::uint64_t hash_file(const std::string& path);

/// Shortest decimal form that round-trips a double exactly.
std::string format_double(double v);

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);

}  // namespace offroad
