#include "mmfuse/io.hpp"

#include <array>
#include <bit>
#include <cinttypes>
#include <string_view>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mmfuse/error.hpp"
#include "mmfuse/threads.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian and written by memcpy");

namespace mmfuse {

namespace {

uint32_t crc_table_entry(uint32_t i) {
  uint32_t c = i;
  for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
  return c;
}

struct ByteWriter {
  std::vector<uint8_t> bytes;

  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u8(uint8_t v) { bytes.push_back(v); }
  void u16(uint16_t v) { raw(&v, 2); }
  void u32(uint32_t v) { raw(&v, 4); }
  void f32(const float* p, size_t n) { raw(p, n * 4); }
};

class ByteReader {
 public:
  ByteReader(std::vector<uint8_t> bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  size_t size() const { return bytes_.size(); }
  size_t offset() const { return off_; }
  const uint8_t* data() const { return bytes_.data(); }

  void raw(void* p, size_t n) {
    require(n);
    std::memcpy(p, bytes_.data() + off_, n);
    off_ += n;
  }
  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint16_t u16() {
    uint16_t v;
    raw(&v, 2);
    return v;
  }
  uint32_t u32() {
    uint32_t v;
    raw(&v, 4);
    return v;
  }

  void require(size_t n) const {
    if (off_ + n > bytes_.size())
      throw IoError(path_ + ": truncated at offset " + std::to_string(off_));
  }

 private:
  std::vector<uint8_t> bytes_;
  std::string path_;
  size_t off_ = 0;
};

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path);
  return bytes;
}

void write_file_bytes(const std::string& path,
                      const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

// Assembles magic + payload + CRC(payload) and checks the inverse.
void write_sealed(const std::string& path, std::string_view magic,
                  const ByteWriter& payload) {
  std::vector<uint8_t> file;
  file.reserve(magic.size() + payload.bytes.size() + 4);
  file.insert(file.end(), magic.begin(), magic.end());
  file.insert(file.end(), payload.bytes.begin(), payload.bytes.end());
  const uint32_t crc = crc32(payload.bytes.data(), payload.bytes.size());
  const auto* cb = reinterpret_cast<const uint8_t*>(&crc);
  file.insert(file.end(), cb, cb + 4);
  write_file_bytes(path, file);
}

ByteReader open_sealed(const std::string& path, std::string_view magic) {
  std::vector<uint8_t> file = read_file_bytes(path);
  if (file.size() < magic.size() + 4)
    throw IoError(path + ": too short for a sealed file");
  if (std::memcmp(file.data(), magic.data(), magic.size()) != 0)
    throw IoError(path + ": bad magic, expected " + std::string(magic));
  const size_t crc_off = file.size() - 4;
  uint32_t stored;
  std::memcpy(&stored, file.data() + crc_off, 4);
  const uint32_t computed =
      crc32(file.data() + magic.size(), crc_off - magic.size());
  if (stored != computed) {
    char msg[160];
    std::snprintf(msg, sizeof(msg),
                  "%s: CRC mismatch at offset %zu, stored %08" PRIx32
                  ", computed %08" PRIx32,
                  path.c_str(), crc_off, stored, computed);
    throw IoError(msg);
  }
  std::vector<uint8_t> payload(file.begin() +
                                   static_cast<std::ptrdiff_t>(magic.size()),
                               file.end() - 4);
  return ByteReader(std::move(payload), path);
}

constexpr std::string_view kCheckpointMagic = "MMFZ1";
constexpr std::string_view kSignalMagic = "SIG1";
constexpr std::string_view kImageMagic = "IMG1";
constexpr uint32_t kCheckpointVersion = 1;

std::string join(const std::string& root, const std::string& rel) {
  return (std::filesystem::path(root) / rel).string();
}

}  // namespace

uint32_t crc32(const uint8_t* data, size_t n) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) t[i] = crc_table_entry(i);
    return t;
  }();
  uint32_t c = 0xffffffffu;
  for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

void write_checkpoint(const std::string& path,
                      const std::vector<CheckpointEntry>& entries) {
  ByteWriter w;
  w.u32(kCheckpointVersion);
  w.u32(static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff)
      throw IoError("checkpoint entry name too long: " + e.name);
    if (e.dims.size() > 0xff)
      throw IoError("checkpoint entry rank too large: " + e.name);
    int64_t numel = 1;
    for (int64_t d : e.dims) {
      if (d <= 0 || d > 0xffffffffll)
        throw IoError("checkpoint dim out of range for " + e.name);
      numel *= d;
    }
    if (numel != static_cast<int64_t>(e.data.size()))
      throw IoError("checkpoint data size does not match dims for " + e.name);
    w.u16(static_cast<uint16_t>(e.name.size()));
    w.raw(e.name.data(), e.name.size());
    w.u8(0);
    w.u8(static_cast<uint8_t>(e.dims.size()));
    for (int64_t d : e.dims) w.u32(static_cast<uint32_t>(d));
    w.f32(e.data.data(), e.data.size());
  }
  write_sealed(path, kCheckpointMagic, w);
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  ByteReader r = open_sealed(path, kCheckpointMagic);
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError(path + ": unsupported checkpoint version " +
                  std::to_string(version));
  const uint32_t count = r.u32();
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const uint16_t name_len = r.u16();
    e.name.resize(name_len);
    r.raw(e.name.data(), name_len);
    const uint8_t dtype = r.u8();
    if (dtype != 0)
      throw IoError(path + ": unknown dtype code " + std::to_string(dtype) +
                    " for " + e.name);
    const uint8_t ndim = r.u8();
    int64_t numel = 1;
    for (uint8_t d = 0; d < ndim; ++d) {
      e.dims.push_back(static_cast<int64_t>(r.u32()));
      numel *= e.dims.back();
    }
    r.require(static_cast<size_t>(numel) * 4);
    e.data.resize(static_cast<size_t>(numel));
    r.raw(e.data.data(), static_cast<size_t>(numel) * 4);
    entries.push_back(std::move(e));
  }
  if (r.offset() != r.size())
    throw IoError(path + ": trailing bytes after entry " +
                  std::to_string(count));
  return entries;
}

void save_store(const std::string& path, const ParamStore<float>& store) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(store.items().size());
  for (const auto& item : store.items()) {
    CheckpointEntry e;
    e.name = item.name;
    e.dims = item.tensor.shape();
    e.data.assign(item.tensor.data(), item.tensor.data() + item.tensor.numel());
    entries.push_back(std::move(e));
  }
  write_checkpoint(path, entries);
}

LoadReport load_into_store(const std::string& path, ParamStore<float>& store) {
  const std::vector<CheckpointEntry> entries = read_checkpoint(path);
  LoadReport report;
  std::vector<bool> used(entries.size(), false);
  for (auto& item : store.items()) {
    const CheckpointEntry* found = nullptr;
    for (size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name == item.name) {
        found = &entries[i];
        used[i] = true;
        break;
      }
    if (found == nullptr) {
      report.missing.push_back(item.name);
      continue;
    }
    if (found->dims != item.tensor.shape())
      throw IoError(path + ": shape mismatch for " + item.name);
    std::memcpy(item.tensor.data(), found->data.data(),
                found->data.size() * sizeof(float));
  }
  for (size_t i = 0; i < entries.size(); ++i)
    if (!used[i]) report.unused.push_back(entries[i].name);
  return report;
}

void write_signal_file(const std::string& path, const Tensor<float>& samples) {
  if (samples.rank() != 2) throw ShapeError("signal file expects [C x T]");
  ByteWriter w;
  w.u32(static_cast<uint32_t>(samples.shape()[0]));
  w.u32(static_cast<uint32_t>(samples.shape()[1]));
  w.f32(samples.data(), static_cast<size_t>(samples.numel()));
  write_sealed(path, kSignalMagic, w);
}

Tensor<float> read_signal_file(const std::string& path) {
  ByteReader r = open_sealed(path, kSignalMagic);
  const int64_t c = static_cast<int64_t>(r.u32());
  const int64_t t = static_cast<int64_t>(r.u32());
  if (c <= 0 || t <= 0) throw IoError(path + ": empty signal dims");
  Tensor<float> out = Tensor<float>::zeros({c, t});
  r.raw(out.data(), static_cast<size_t>(out.numel()) * 4);
  if (r.offset() != r.size()) throw IoError(path + ": trailing bytes");
  return out;
}

void write_image_file(const std::string& path, const Tensor<float>& pixels) {
  if (pixels.rank() != 3) throw ShapeError("image file expects [ch x H x W]");
  ByteWriter w;
  w.u32(static_cast<uint32_t>(pixels.shape()[0]));
  w.u32(static_cast<uint32_t>(pixels.shape()[1]));
  w.u32(static_cast<uint32_t>(pixels.shape()[2]));
  w.f32(pixels.data(), static_cast<size_t>(pixels.numel()));
  write_sealed(path, kImageMagic, w);
}

Tensor<float> read_image_file(const std::string& path) {
  ByteReader r = open_sealed(path, kImageMagic);
  const int64_t ch = static_cast<int64_t>(r.u32());
  const int64_t h = static_cast<int64_t>(r.u32());
  const int64_t w = static_cast<int64_t>(r.u32());
  if (ch <= 0 || h <= 0 || w <= 0) throw IoError(path + ": empty image dims");
  Tensor<float> out = Tensor<float>::zeros({ch, h, w});
  r.raw(out.data(), static_cast<size_t>(out.numel()) * 4);
  if (r.offset() != r.size()) throw IoError(path + ": trailing bytes");
  return out;
}

void write_pgm(const std::string& path, int64_t width, int64_t height,
               const std::vector<uint8_t>& gray) {
  if (width <= 0 || height <= 0 ||
      gray.size() != static_cast<size_t>(width * height))
    throw ShapeError("graymap dims do not match the pixel count");
  std::vector<uint8_t> file;
  char header[64];
  const int n = std::snprintf(header, sizeof(header), "P5\n%lld %lld\n255\n",
                              static_cast<long long>(width),
                              static_cast<long long>(height));
  file.insert(file.end(), header, header + n);
  file.insert(file.end(), gray.begin(), gray.end());
  write_file_bytes(path, file);
}

PgmImage read_pgm(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  PgmImage img;
  long long w = 0, h = 0, maxval = 0;
  int consumed = 0;
  const std::string head(bytes.begin(),
                         bytes.begin() + std::min<size_t>(bytes.size(), 64));
  if (std::sscanf(head.c_str(), "P5\n%lld %lld\n%lld\n%n", &w, &h, &maxval,
                  &consumed) != 3 ||
      maxval != 255 || w <= 0 || h <= 0)
    throw IoError(path + ": not a maxval-255 binary graymap");
  if (bytes.size() != static_cast<size_t>(consumed) +
                          static_cast<size_t>(w) * static_cast<size_t>(h))
    throw IoError(path + ": pixel payload size mismatch");
  img.width = w;
  img.height = h;
  img.gray.assign(bytes.begin() + consumed, bytes.end());
  return img;
}

void write_manifest(const std::string& path,
                    const std::vector<ManifestRow>& rows) {
  std::ostringstream out;
  out << "subject_id\tsignal_path\timage_path\tdisease\tPHV\tPHE\tsplit\n";
  char num[3][32];
  for (const auto& r : rows) {
    std::snprintf(num[0], sizeof(num[0]), "%.17g", r.disease);
    std::snprintf(num[1], sizeof(num[1]), "%.17g", r.phv);
    std::snprintf(num[2], sizeof(num[2]), "%.17g", r.phe);
    out << r.subject_id << '\t' << r.signal_path << '\t' << r.image_path
        << '\t' << num[0] << '\t' << num[1] << '\t' << num[2] << '\t'
        << r.split << '\n';
  }
  const std::string s = out.str();
  write_file_bytes(path, std::vector<uint8_t>(s.begin(), s.end()));
}

std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) ||
      line != "subject_id\tsignal_path\timage_path\tdisease\tPHV\tPHE\tsplit")
    throw IoError(path + ": unexpected manifest header");
  std::vector<ManifestRow> rows;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    size_t start = 0;
    while (true) {
      const size_t tab = line.find('\t', start);
      f.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (f.size() != 7)
      throw IoError(path + ": line " + std::to_string(line_no) +
                    " has " + std::to_string(f.size()) + " fields");
    ManifestRow r;
    r.subject_id = f[0];
    r.signal_path = f[1];
    r.image_path = f[2];
    char* end = nullptr;
    r.disease = std::strtod(f[3].c_str(), &end);
    if (end == nullptr || *end != '\0')
      throw IoError(path + ": bad number on line " + std::to_string(line_no));
    r.phv = std::strtod(f[4].c_str(), &end);
    if (end == nullptr || *end != '\0')
      throw IoError(path + ": bad number on line " + std::to_string(line_no));
    r.phe = std::strtod(f[5].c_str(), &end);
    if (end == nullptr || *end != '\0')
      throw IoError(path + ": bad number on line " + std::to_string(line_no));
    r.split = f[6];
    if (r.split != "train" && r.split != "val" && r.split != "test")
      throw IoError(path + ": unknown split on line " +
                    std::to_string(line_no));
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_grid_text(const std::string& path, const Tensor<float>& grid) {
  if (grid.rank() != 2) throw ShapeError("grid text expects a matrix");
  std::ostringstream out;
  const int64_t h = grid.shape()[0], w = grid.shape()[1];
  char num[32];
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      std::snprintf(num, sizeof(num), "%.9g",
                    static_cast<double>(grid.data()[y * w + x]));
      out << (x ? " " : "") << num;
    }
    out << '\n';
  }
  const std::string s = out.str();
  write_file_bytes(path, std::vector<uint8_t>(s.begin(), s.end()));
}

Tensor<float> read_grid_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::vector<float>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<float> row;
    double v;
    while (ls >> v) row.push_back(static_cast<float>(v));
    if (!ls.eof()) throw IoError(path + ": bad grid value");
    if (!rows.empty() && row.size() != rows.front().size())
      throw IoError(path + ": ragged grid rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError(path + ": empty grid");
  Tensor<float> out = Tensor<float>::zeros(
      {static_cast<int64_t>(rows.size()),
       static_cast<int64_t>(rows.front().size())});
  for (size_t y = 0; y < rows.size(); ++y)
    for (size_t x = 0; x < rows.front().size(); ++x)
      out.data()[y * rows.front().size() + x] = rows[y][x];
  return out;
}

void write_dataset(const std::string& root, const SynthSpec& spec,
                   uint64_t seed) {
  validate_spec(spec);
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "signals");
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "masks");

  const int64_t n = total_subjects(spec);
  std::vector<ManifestRow> rows(static_cast<size_t>(n));
  parallel_records(n, [&](int64_t i) {
    const SynthRecord rec = generate_record(spec, seed, i);
    const std::string& id = rec.signal.subject_id;
    ManifestRow row;
    row.subject_id = id;
    row.signal_path = "signals/" + id + ".sig";
    row.image_path = "images/" + id + ".img";
    row.disease = rec.signal.labels.at("disease");
    row.phv = rec.signal.labels.at("PHV");
    row.phe = rec.signal.labels.at("PHE");
    row.split = split_name(split_for(spec, i));
    write_signal_file(join(root, row.signal_path), rec.signal.samples);
    write_image_file(join(root, row.image_path), rec.image.record.pixels);
    std::vector<uint8_t> gray(rec.image.mask.size());
    for (size_t p = 0; p < gray.size(); ++p)
      gray[p] = rec.image.mask[p] ? 255 : 0;
    write_pgm(join(root, "masks/" + id + ".mask.pgm"), spec.image_size,
              spec.image_size, gray);
    rows[static_cast<size_t>(i)] = std::move(row);
  });
  write_manifest(join(root, "manifest.tsv"), rows);
}

DatasetIndex load_dataset_index(const std::string& root) {
  DatasetIndex index;
  index.root = root;
  index.rows = read_manifest(join(root, "manifest.tsv"));
  return index;
}

SignalRecord load_signal(const DatasetIndex& index, size_t row,
                         double sampling_hz) {
  if (row >= index.rows.size()) throw DataError("manifest row out of range");
  const ManifestRow& r = index.rows[row];
  SignalRecord rec;
  rec.subject_id = r.subject_id;
  rec.samples = read_signal_file(join(index.root, r.signal_path));
  rec.sampling_hz = sampling_hz;
  rec.labels = {{"disease", r.disease}, {"PHV", r.phv}, {"PHE", r.phe}};
  return rec;
}

ImageRecord load_image(const DatasetIndex& index, size_t row) {
  if (row >= index.rows.size()) throw DataError("manifest row out of range");
  const ManifestRow& r = index.rows[row];
  ImageRecord rec;
  rec.subject_id = r.subject_id;
  rec.pixels = read_image_file(join(index.root, r.image_path));
  return rec;
}

PgmImage load_mask(const DatasetIndex& index, size_t row) {
  if (row >= index.rows.size()) throw DataError("manifest row out of range");
  return read_pgm(
      join(index.root, "masks/" + index.rows[row].subject_id + ".mask.pgm"));
}

}  // namespace mmfuse
