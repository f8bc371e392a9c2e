#include "trm/augmentation.hpp"

#include <unordered_set>

#include "trm/errors.hpp"
#include "trm/rng.hpp"

namespace trm {

namespace {

// Output dimensions and the (row, col) source index for each element.
void dihedral_dims(DihedralElement d, int h, int w, int& out_h, int& out_w) {
  const bool swaps = d == DihedralElement::Rot90 || d == DihedralElement::Rot270 ||
                     d == DihedralElement::Transpose || d == DihedralElement::AntiTranspose;
  out_h = swaps ? w : h;
  out_w = swaps ? h : w;
}

}  // namespace

DihedralElement dihedral_inverse(DihedralElement d) {
  switch (d) {
    case DihedralElement::Rot90:
      return DihedralElement::Rot270;
    case DihedralElement::Rot270:
      return DihedralElement::Rot90;
    default:
      return d;  // identity, rot180, flips and transposes are involutions
  }
}

Grid apply_dihedral(const Grid& g, DihedralElement d) {
  int out_h = 0;
  int out_w = 0;
  dihedral_dims(d, g.height, g.width, out_h, out_w);
  Grid out;
  out.height = out_h;
  out.width = out_w;
  out.cells.resize(static_cast<size_t>(out_h) * out_w);
  const int h = g.height;
  const int w = g.width;
  for (int r = 0; r < out_h; ++r) {
    for (int c = 0; c < out_w; ++c) {
      uint8_t v = 0;
      switch (d) {
        case DihedralElement::Identity:
          v = g.at(r, c);
          break;
        case DihedralElement::Rot90:  // clockwise
          v = g.at(h - 1 - c, r);
          break;
        case DihedralElement::Rot180:
          v = g.at(h - 1 - r, w - 1 - c);
          break;
        case DihedralElement::Rot270:
          v = g.at(c, w - 1 - r);
          break;
        case DihedralElement::FlipHorizontal:  // mirror left-right
          v = g.at(r, w - 1 - c);
          break;
        case DihedralElement::FlipVertical:  // mirror up-down
          v = g.at(h - 1 - r, c);
          break;
        case DihedralElement::Transpose:
          v = g.at(c, r);
          break;
        case DihedralElement::AntiTranspose:
          v = g.at(h - 1 - c, w - 1 - r);
          break;
      }
      out.at(r, c) = v;
    }
  }
  return out;
}

ColorPermutation ColorPermutation::identity() {
  ColorPermutation p;
  for (int i = 0; i < kNumColors; ++i) p.mapping[i] = static_cast<uint8_t>(i);
  return p;
}

bool ColorPermutation::is_valid() const {
  bool seen[kNumColors] = {};
  for (uint8_t v : mapping) {
    if (v >= kNumColors || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

ColorPermutation ColorPermutation::inverse() const {
  ColorPermutation inv;
  for (int i = 0; i < kNumColors; ++i) inv.mapping[mapping[i]] = static_cast<uint8_t>(i);
  return inv;
}

Grid apply_colors(const Grid& g, const ColorPermutation& perm) {
  Grid out = g;
  for (auto& cell : out.cells) cell = perm.mapping[cell];
  return out;
}

Augmentation Augmentation::identity() {
  return Augmentation{DihedralElement::Identity, ColorPermutation::identity(), Translation{0, 0}};
}

bool Augmentation::is_identity() const {
  return dihedral == DihedralElement::Identity && colors.mapping == ColorPermutation::identity().mapping &&
         offset.dx == 0 && offset.dy == 0;
}

AugmentationRecord serialize_augmentation(const Augmentation& a) {
  AugmentationRecord rec = {};
  rec[0] = static_cast<uint8_t>(a.dihedral);
  for (int i = 0; i < kNumColors; ++i) rec[1 + i] = a.colors.mapping[i];
  rec[11] = static_cast<uint8_t>(a.offset.dx);
  rec[12] = static_cast<uint8_t>(a.offset.dy);
  return rec;
}

Augmentation deserialize_augmentation(const AugmentationRecord& rec) {
  Augmentation a;
  if (rec[0] > 7) raise(ErrorCode::ParseError, "dihedral index outside 0..7");
  a.dihedral = static_cast<DihedralElement>(rec[0]);
  for (int i = 0; i < kNumColors; ++i) a.colors.mapping[i] = rec[1 + i];
  if (!a.colors.is_valid()) raise(ErrorCode::ParseError, "color mapping is not a permutation");
  a.offset.dx = rec[11];
  a.offset.dy = rec[12];
  return a;
}

TokenCanvas apply_augmentation(const Grid& g, const Augmentation& a, int side) {
  const Grid transformed = apply_colors(apply_dihedral(g, a.dihedral), a.colors);
  if (transformed.height + a.offset.dy > side || transformed.width + a.offset.dx > side) {
    raise(ErrorCode::TranslationOverflow,
          "content " + std::to_string(transformed.height) + "x" + std::to_string(transformed.width) +
              " at offset (" + std::to_string(a.offset.dx) + "," + std::to_string(a.offset.dy) +
              ") exceeds canvas side " + std::to_string(side));
  }
  TokenCanvas canvas = empty_canvas(side);
  for (int r = 0; r < transformed.height; ++r) {
    for (int c = 0; c < transformed.width; ++c) {
      canvas.at(r + a.offset.dy, c + a.offset.dx) = static_cast<uint8_t>(transformed.at(r, c) + 1);
    }
  }
  return canvas;
}

Grid apply_augmentation_grid(const Grid& g, const Augmentation& a) {
  return apply_colors(apply_dihedral(g, a.dihedral), a.colors);
}

Grid InverseAugmentation::operator()(const TokenCanvas& predicted) const {
  const int side = predicted.side;
  // Un-offset first: shift content up-left by (dy, dx) on the canvas.
  TokenCanvas shifted = empty_canvas(side);
  for (int r = 0; r + forward.offset.dy < side; ++r) {
    for (int c = 0; c + forward.offset.dx < side; ++c) {
      shifted.at(r, c) = predicted.at(r + forward.offset.dy, c + forward.offset.dx);
    }
  }
  Grid grid = decode_grid(shifted);
  grid = apply_colors(grid, forward.colors.inverse());
  return apply_dihedral(grid, dihedral_inverse(forward.dihedral));
}

Grid InverseAugmentation::operator()(const Grid& predicted) const {
  Grid grid = apply_colors(predicted, forward.colors.inverse());
  return apply_dihedral(grid, dihedral_inverse(forward.dihedral));
}

InverseAugmentation invert_augmentation(const Augmentation& a) { return InverseAugmentation{a}; }

uint64_t augmentation_space_size(int max_h, int max_w, bool fix_background, int side) {
  const int max_dim = std::max(max_h, max_w);
  if (max_dim > side) return 0;
  const uint64_t offsets = static_cast<uint64_t>(side - max_dim + 1);
  // 10! = 3,628,800 color permutations; 9! when the background is pinned.
  const uint64_t perms = fix_background ? 362880ULL : 3628800ULL;
  return 8ULL * perms * offsets * offsets;
}

std::vector<Augmentation> sample_augmentations(uint64_t task_seed, int count, int max_h, int max_w,
                                               bool fix_background, int side) {
  if (count < 1) raise(ErrorCode::InsufficientAugmentationSpace, "count must be >= 1");
  const uint64_t space = augmentation_space_size(max_h, max_w, fix_background, side);
  if (static_cast<uint64_t>(count) > space) {
    raise(ErrorCode::InsufficientAugmentationSpace,
          "requested " + std::to_string(count) + " distinct augmentations but only " +
              std::to_string(space) + " exist");
  }
  const int max_dim = std::max(max_h, max_w);
  // Translations are bounded by the largest dimension in either orientation so
  // every sampled augmentation fits after any dihedral transform.
  const uint64_t offset_bound = static_cast<uint64_t>(side - max_dim + 1);

  std::vector<Augmentation> out;
  out.reserve(static_cast<size_t>(count));
  std::unordered_set<uint64_t> seen;
  auto key_of = [](const Augmentation& a) {
    const AugmentationRecord rec = serialize_augmentation(a);
    return fnv1a64(rec.data(), rec.size());
  };

  const Augmentation identity = Augmentation::identity();
  out.push_back(identity);
  seen.insert(key_of(identity));

  Rng rng(task_seed);
  while (static_cast<int>(out.size()) < count) {
    Augmentation a;
    a.dihedral = static_cast<DihedralElement>(rng.next_below(8));
    a.colors = ColorPermutation::identity();
    if (fix_background) {
      rng.shuffle(a.colors.mapping.data() + 1, kNumColors - 1);
    } else {
      rng.shuffle(a.colors.mapping.data(), kNumColors);
    }
    a.offset.dx = static_cast<int>(rng.next_below(offset_bound));
    a.offset.dy = static_cast<int>(rng.next_below(offset_bound));
    if (seen.insert(key_of(a)).second) out.push_back(a);
  }
  return out;
}

}  // namespace trm
