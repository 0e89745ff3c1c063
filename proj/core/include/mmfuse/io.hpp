#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmfuse/model.hpp"
#include "mmfuse/record.hpp"
#include "mmfuse/synthdata.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

// Reflected CRC-32, polynomial 0xEDB88320, init and final xor 0xFFFFFFFF.
uint32_t crc32(const uint8_t* data, size_t n);

// Checkpoint file: magic "MMFZ1", then a payload of u32 format version,
// u32 array count, and per array u16 name length, name bytes, u8 dtype
// (0 = f32), u8 ndim, u32 dims, f32 data row-major; a CRC-32 of the payload
// closes the file. All integers and floats little-endian.
struct CheckpointEntry {
  std::string name;
  std::vector<int64_t> dims;
  std::vector<float> data;
};

void write_checkpoint(const std::string& path,
                      const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

void save_store(const std::string& path, const ParamStore<float>& store);

// Name-based checkpoint application. Parameters absent from the file keep
// their fresh initialization and are reported, never zeroed; file entries
// with no matching parameter are reported as unused. A name held by both
// sides with different dims is an IoError.
struct LoadReport {
  std::vector<std::string> missing;
  std::vector<std::string> unused;
};

LoadReport load_into_store(const std::string& path, ParamStore<float>& store);

// Signal file: magic "SIG1", u32 channels, u32 samples, f32 data, CRC-32 of
// everything after the magic. Image file: magic "IMG1", u32 channels, u32
// height, u32 width, f32 data, CRC-32 likewise.
void write_signal_file(const std::string& path, const Tensor<float>& samples);
Tensor<float> read_signal_file(const std::string& path);
void write_image_file(const std::string& path, const Tensor<float>& pixels);
Tensor<float> read_image_file(const std::string& path);

// Binary portable graymap, maxval 255.
void write_pgm(const std::string& path, int64_t width, int64_t height,
               const std::vector<uint8_t>& gray);

struct PgmImage {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> gray;
};

PgmImage read_pgm(const std::string& path);

// manifest.tsv row; paths are relative to the manifest's directory.
struct ManifestRow {
  std::string subject_id;
  std::string signal_path;
  std::string image_path;
  double disease = 0;
  double phv = 0;
  double phe = 0;
  std::string split;
};

void write_manifest(const std::string& path,
                    const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::string& path);

// Space-separated text matrix, one line per row, printed with enough digits
// that f32 values re-parse identically.
void write_grid_text(const std::string& path, const Tensor<float>& grid);
Tensor<float> read_grid_text(const std::string& path);

// Dataset layout under root: signals/<id>.sig, images/<id>.img,
// masks/<id>.mask.pgm, manifest.tsv. Generation is parallel over subjects
// and bit-reproducible for a given (spec, seed).
void write_dataset(const std::string& root, const SynthSpec& spec,
                   uint64_t seed);

struct DatasetIndex {
  std::string root;
  std::vector<ManifestRow> rows;
};

DatasetIndex load_dataset_index(const std::string& root);

// Attaches the manifest labels to the loaded samples.
SignalRecord load_signal(const DatasetIndex& index, size_t row,
                         double sampling_hz);
ImageRecord load_image(const DatasetIndex& index, size_t row);
PgmImage load_mask(const DatasetIndex& index, size_t row);

}  // namespace mmfuse
