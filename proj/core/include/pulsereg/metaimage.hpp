#pragma once

// MetaImage (.mha single file, .mhd + raw) volumes, masks and vector fields.
//
// Supported element types: MET_UCHAR, MET_SHORT, MET_FLOAT, either byte
// order. Values are held as float, which represents all three exactly.
// Multi-channel files (ElementNumberOfChannels) interleave channels per
// voxel on disk and are returned channels-first (C x D x H x W).

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pulsereg/array.hpp"
#include "pulsereg/geometry.hpp"
#include "pulsereg/loss.hpp"

namespace pulsereg {

enum class ElementType { UChar, Short, Float };

const char* element_type_name(ElementType t);

struct VolumeHeader {
  Grid grid;
  ElementType type = ElementType::Float;
  bool big_endian = false;
  int channels = 1;
  std::string data_file = "LOCAL";
  std::map<std::string, std::string> extra;  // keys written verbatim, e.g. ComponentOrder
  std::vector<std::string> warnings;         // filled by the reader
};

struct MetaVolume {
  VolumeHeader header;
  Array<float> data;  // C x D x H x W
};

MetaVolume read_volume(const std::filesystem::path& path);

/// Writes `.mha` with embedded data or `.mhd` with a sibling `.raw` file.
/// Values are converted to the header's element type; out-of-range or
/// non-integral values for integer types are rejected.
void write_volume(const std::filesystem::path& path, const Array<float>& data, VolumeHeader header);

/// Reads a single-channel volume as a mask (nonzero = foreground).
Mask read_mask(const std::filesystem::path& path, Grid* grid = nullptr);
void write_mask(const std::filesystem::path& path, const Mask& mask, const Grid& grid);

enum class DisplacementUnits { Voxel, Millimeter };

/// 3-component displacement field with ComponentOrder = xyz.
void write_field(const std::filesystem::path& path, const Array<float>& field, const Grid& grid,
                 DisplacementUnits units);

struct FieldFile {
  Array<float> field;  // 3 x D x H x W in the file's units
  Grid grid;
  DisplacementUnits units = DisplacementUnits::Voxel;
};
FieldFile read_field(const std::filesystem::path& path);

/// Converts between voxel and mm displacement components using grid spacing.
Array<float> field_to_voxels(const FieldFile& f);

}  // namespace pulsereg
