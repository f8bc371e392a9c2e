#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "trm/grid.hpp"

namespace trm {

// The eight elements of the D4 symmetry group acting on grids.
enum class DihedralElement : uint8_t {
  Identity = 0,
  Rot90 = 1,  // clockwise
  Rot180 = 2,
  Rot270 = 3,
  FlipHorizontal = 4,  // mirror left-right
  FlipVertical = 5,    // mirror up-down
  Transpose = 6,
  AntiTranspose = 7,
};

inline constexpr int kDihedralCount = 8;

DihedralElement dihedral_inverse(DihedralElement d);
Grid apply_dihedral(const Grid& g, DihedralElement d);

struct ColorPermutation {
  std::array<uint8_t, kNumColors> mapping = {};

  static ColorPermutation identity();
  bool is_valid() const;
  ColorPermutation inverse() const;

  bool operator==(const ColorPermutation& other) const = default;
};

Grid apply_colors(const Grid& g, const ColorPermutation& perm);

// Non-negative canvas offset in cells; dx moves right, dy moves down.
struct Translation {
  int dx = 0;
  int dy = 0;

  bool operator==(const Translation& other) const = default;
};

// Composite transform applied in the fixed order dihedral, colors, offset.
struct Augmentation {
  DihedralElement dihedral = DihedralElement::Identity;
  ColorPermutation colors = ColorPermutation::identity();
  Translation offset;

  static Augmentation identity();
  bool is_identity() const;

  bool operator==(const Augmentation& other) const = default;
};

// Persistent 13-byte layout: [d:u8][perm:10xu8][dx:u8][dy:u8].
using AugmentationRecord = std::array<uint8_t, 13>;
AugmentationRecord serialize_augmentation(const Augmentation& a);
Augmentation deserialize_augmentation(const AugmentationRecord& rec);

// Transforms a grid and places it on the canvas at the augmentation offset.
// Throws TranslationOverflow when the content would exceed the canvas.
TokenCanvas apply_augmentation(const Grid& g, const Augmentation& a, int side = kMaxGridSide);

// Grid-level result, offset ignored (content representation is identical).
Grid apply_augmentation_grid(const Grid& g, const Augmentation& a);

// Maps a predicted canvas back to the original frame: un-offset, decode,
// inverse colors, inverse dihedral. Total on any canvas.
struct InverseAugmentation {
  Augmentation forward;

  Grid operator()(const TokenCanvas& predicted) const;
  Grid operator()(const Grid& predicted) const;
};

InverseAugmentation invert_augmentation(const Augmentation& a);

// Number of distinct augmentations whose translations fit a task whose
// largest grid dimension is max(max_h, max_w), in any dihedral orientation.
uint64_t augmentation_space_size(int max_h, int max_w, bool fix_background, int side = kMaxGridSide);

// Deterministic sample of `count` distinct augmentations; element 0 is always
// the identity. Every translation fits grids of size up to (max_h, max_w) in
// any orientation. Throws InsufficientAugmentationSpace when the space is too
// small.
std::vector<Augmentation> sample_augmentations(uint64_t task_seed, int count, int max_h, int max_w,
                                               bool fix_background = false, int side = kMaxGridSide);

}  // namespace trm
