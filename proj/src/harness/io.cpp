#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "internal.hpp"

namespace shepherd::harness {

namespace detail {

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(16) << v;
  return s.str();
}

void csv_row(std::ostream& out, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
  out << '\n';
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw Error(path.string() + " is empty");
  std::istringstream h(line);
  for (std::string cell; std::getline(h, cell, ',');) t.header.push_back(cell);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream r(line);
    for (std::string cell; std::getline(r, cell, ',');) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(path.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (row.size() != t.header.size()) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": wrong column count");
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::ofstream open_output(const fs::path& path, bool binary) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

namespace {
template <class T>
void put_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}
template <class T>
T get_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw Error("unexpected end of binary file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}
}  // namespace

void put_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
void put_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
void put_f64(std::ostream& out, double v) { put_le(out, v); }
std::uint32_t get_u32(std::istream& in) { return get_le<std::uint32_t>(in); }
std::uint64_t get_u64(std::istream& in) { return get_le<std::uint64_t>(in); }
double get_f64(std::istream& in) { return get_le<double>(in); }

void put_f64s(std::ostream& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  } else {
    for (double x : v) put_f64(out, x);
  }
}

void get_f64s(std::istream& in, std::vector<double>& v) {
  const std::uint64_t n = get_u64(in);
  if (n > (std::uint64_t{1} << 40)) throw Error("corrupt array length in binary file");
  v.resize(n);
  if constexpr (std::endian::native == std::endian::little) {
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double))))
      throw Error("unexpected end of binary file");
  } else {
    for (double& x : v) x = get_f64(in);
  }
}

}  // namespace detail

using namespace detail;

namespace {

constexpr char kMagic[8] = {'H', 'R', 'D', 'S', 'N', 'A', 'P', '\0'};
constexpr std::uint32_t kSnapshotVersion = 1;

std::string hex(const unsigned char* d, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < n; ++i) {
    s += digits[d[i] >> 4];
    s += digits[d[i] & 15];
  }
  return s;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  void update(const void* p, std::size_t n) {
    if (EVP_DigestUpdate(ctx_, p, n) != 1) throw Error("SHA-256 update failed");
  }
  std::string finish() {
    unsigned char d[EVP_MAX_MD_SIZE];
    unsigned n = 0;
    if (EVP_DigestFinal_ex(ctx_, d, &n) != 1) throw Error("SHA-256 final failed");
    return hex(d, n);
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.finish();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  Sha256 h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.finish();
}

void write_snapshot(const fs::path& path, const meanfield::DensityField& field, double time) {
  const auto& g = field.grid;
  if (field.values.size() != g.cells()) throw Error("snapshot field does not match its grid");
  std::ofstream out = open_output(path, true);
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kSnapshotVersion);
  put_u32(out, static_cast<std::uint32_t>(g.nx));
  put_u32(out, static_cast<std::uint32_t>(g.nv));
  put_u32(out, 0);
  put_f64(out, -g.x_half);
  put_f64(out, g.x_half);
  put_f64(out, -g.v_max);
  put_f64(out, g.v_max);
  put_f64(out, time);
  for (double v : field.values) put_f64(out, v);
  out.flush();
  if (!out) throw Error("writing snapshot " + path.string() + " failed");
}

Snapshot read_snapshot(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw Error(path.string() + " is not a density snapshot");
  }
  const std::uint32_t version = get_u32(in);
  if (version != kSnapshotVersion) {
    throw Error(path.string() + ": unsupported snapshot version " + std::to_string(version));
  }
  Snapshot s;
  s.grid.nx = static_cast<int>(get_u32(in));
  s.grid.nv = static_cast<int>(get_u32(in));
  get_u32(in);
  const double x_lo = get_f64(in), x_hi = get_f64(in), v_lo = get_f64(in), v_hi = get_f64(in);
  s.grid.x_half = x_hi;
  s.grid.v_max = v_hi;
  if (x_lo != -x_hi || v_lo != -v_hi) throw Error(path.string() + ": grid bounds are not symmetric");
  s.grid.validate();
  s.time = get_f64(in);
  s.values.resize(s.grid.cells());
  for (double& v : s.values) v = get_f64(in);
  if (in.peek() != std::char_traits<char>::eof()) throw Error(path.string() + ": trailing data");
  return s;
}

void write_state(std::ostream& out, const MicroState& s) {
  put_u32(out, static_cast<std::uint32_t>(s.dim));
  put_f64s(out, s.positions);
  put_f64s(out, s.velocities);
  put_f64s(out, s.agents);
}

void read_state(std::istream& in, MicroState& s) {
  s.dim = static_cast<int>(get_u32(in));
  get_f64s(in, s.positions);
  get_f64s(in, s.velocities);
  get_f64s(in, s.agents);
}

void write_state(std::ostream& out, const meanfield::MfState& s) {
  const auto& g = s.f.grid;
  put_u32(out, static_cast<std::uint32_t>(g.nx));
  put_u32(out, static_cast<std::uint32_t>(g.nv));
  put_f64(out, g.x_half);
  put_f64(out, g.v_max);
  put_f64s(out, s.f.values);
  put_f64s(out, s.agents);
  put_f64s(out, s.accel);
}

void read_state(std::istream& in, meanfield::MfState& s) {
  s.f.grid.nx = static_cast<int>(get_u32(in));
  s.f.grid.nv = static_cast<int>(get_u32(in));
  s.f.grid.x_half = get_f64(in);
  s.f.grid.v_max = get_f64(in);
  get_f64s(in, s.f.values);
  get_f64s(in, s.agents);
  get_f64s(in, s.accel);
}

template <class State>
DiskCheckpointStore<State>::DiskCheckpointStore(fs::path directory) : dir_(std::move(directory)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error("cannot create checkpoint directory " + dir_.string() + ": " + ec.message());
}

template <class State>
DiskCheckpointStore<State>::~DiskCheckpointStore() {
  std::error_code ec;
  fs::remove_all(dir_, ec);
}

template <class State>
fs::path DiskCheckpointStore<State>::file(std::size_t slot) const {
  return dir_ / ("slot_" + std::to_string(slot) + ".bin");
}

template <class State>
void DiskCheckpointStore<State>::put(std::size_t slot, const State& s) {
  std::ofstream out(file(slot), std::ios::binary | std::ios::trunc);
  if (out) {
    write_state(out, s);
    out.flush();
  }
  if (!out) throw Error("checkpoint write failed (disk full?): " + file(slot).string());
  ++writes_;
}

template <class State>
State DiskCheckpointStore<State>::get(std::size_t slot) {
  std::ifstream in(file(slot), std::ios::binary);
  if (!in) throw Error("checkpoint missing: " + file(slot).string());
  State s;
  read_state(in, s);
  return s;
}

template class DiskCheckpointStore<MicroState>;
template class DiskCheckpointStore<meanfield::MfState>;

}  // namespace shepherd::harness
