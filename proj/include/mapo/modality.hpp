#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mapo {

enum class Modality : uint8_t { V = 0, A = 1, S = 2 };

inline constexpr std::array<Modality, 3> kAllModalities = {Modality::V, Modality::A,
                                                           Modality::S};

inline char modality_char(Modality m) {
  switch (m) {
    case Modality::V: return 'V';
    case Modality::A: return 'A';
    case Modality::S: return 'S';
  }
  throw std::invalid_argument("unknown modality");
}

// Nonempty subset of {V, A, S}. Seven distinct values exist; the canonical
// order is complexity-ascending with V < A < S inside each level:
// V, A, S, VA, VS, AS, VAS.
class ModalityTag {
 public:
  constexpr ModalityTag() : bits_(0) {}

  static constexpr ModalityTag from_bits(uint8_t bits) {
    ModalityTag t;
    t.bits_ = bits;
    return t;
  }

  constexpr bool contains(Modality m) const {
    return (bits_ >> static_cast<uint8_t>(m)) & 1u;
  }

  constexpr bool contains(ModalityTag other) const {
    return (bits_ & other.bits_) == other.bits_;
  }

  constexpr ModalityTag with(Modality m) const {
    return from_bits(bits_ | static_cast<uint8_t>(1u << static_cast<uint8_t>(m)));
  }

  constexpr ModalityTag without(Modality m) const {
    return from_bits(bits_ & static_cast<uint8_t>(~(1u << static_cast<uint8_t>(m))));
  }

  constexpr bool empty() const { return bits_ == 0; }

  // |members|, the Uni/Bi/Tri partition key.
  constexpr int complexity() const { return std::popcount(bits_); }

  constexpr uint8_t bits() const { return bits_; }

  std::string to_string() const {
    std::string s;
    for (Modality m : kAllModalities)
      if (contains(m)) s.push_back(modality_char(m));
    return s;
  }

  static ModalityTag parse(const std::string& s) {
    ModalityTag t;
    for (char c : s) {
      switch (c) {
        case 'V': t = t.with(Modality::V); break;
        case 'A': t = t.with(Modality::A); break;
        case 'S': t = t.with(Modality::S); break;
        default: throw std::invalid_argument("bad modality tag string: " + s);
      }
    }
    if (t.empty()) throw std::invalid_argument("modality tag must be nonempty");
    return t;
  }

  constexpr bool operator==(const ModalityTag&) const = default;

 private:
  uint8_t bits_;
};

namespace tags {
inline constexpr ModalityTag V = ModalityTag::from_bits(0b001);
inline constexpr ModalityTag A = ModalityTag::from_bits(0b010);
inline constexpr ModalityTag S = ModalityTag::from_bits(0b100);
inline constexpr ModalityTag VA = ModalityTag::from_bits(0b011);
inline constexpr ModalityTag VS = ModalityTag::from_bits(0b101);
inline constexpr ModalityTag AS = ModalityTag::from_bits(0b110);
inline constexpr ModalityTag VAS = ModalityTag::from_bits(0b111);
}  // namespace tags

inline constexpr std::array<ModalityTag, 7> kCanonicalTags = {
    tags::V, tags::A, tags::S, tags::VA, tags::VS, tags::AS, tags::VAS};

// Index of a tag in kCanonicalTags; total order used for every tie-break.
inline int canonical_index(ModalityTag t) {
  for (int i = 0; i < 7; ++i)
    if (kCanonicalTags[static_cast<size_t>(i)] == t) return i;
  throw std::invalid_argument("not a valid modality tag");
}

struct TagCanonicalLess {
  bool operator()(ModalityTag a, ModalityTag b) const {
    return canonical_index(a) < canonical_index(b);
  }
};

}  // namespace mapo
