"""Free-semigroup words with run-length-compressed powers.

Words are stored in text order: the leftmost factor is the operator applied
last, so ``evaluate`` walks the factors right to left.  Exponents are exact
Python integers and may be astronomically large; the representation cost of
``power`` is O(1) regardless of the exponent.
"""

from __future__ import annotations

import numpy as np

from ._mp import int_digits

__all__ = [
    "PowerWord",
    "OperatorAssignment",
    "WordError",
    "EqualityBudgetError",
    "concat",
    "power",
    "substitute",
    "occurrences",
    "evaluate",
    "check_word_continuity",
    "transpose_letters",
    "restrict_alphabet",
    "parse_word",
]


class WordError(ValueError):
    pass


class EqualityBudgetError(RuntimeError):
    """Semantic equality could not be decided within the step budget."""


def _canonical(alphabet_size, factors):
    """Merge adjacent equal atoms, flatten trivial nests, drop identities."""
    out = []
    for atom, exp in factors:
        if exp < 1:
            raise WordError("factor exponents must be >= 1")
        if isinstance(atom, PowerWord):
            if atom.alphabet_size > alphabet_size:
                raise WordError("nested word exceeds alphabet")
            if not atom.factors:  # identity^e = identity
                continue
            if len(atom.factors) == 1:
                inner_atom, inner_exp = atom.factors[0]
                out.append((inner_atom, inner_exp * exp))
                continue
            if exp == 1:
                out.extend(atom.factors)
                continue
            out.append((atom, exp))
        else:
            if not 1 <= atom <= alphabet_size:
                raise WordError(f"letter a{atom} outside alphabet 1..{alphabet_size}")
            out.append((atom, exp))
    merged = []
    for atom, exp in out:
        if merged and _atoms_match(merged[-1][0], atom):
            merged[-1] = (merged[-1][0], merged[-1][1] + exp)
        else:
            merged.append((atom, exp))
    return tuple(merged)


def _atoms_match(a, b):
    if isinstance(a, PowerWord) and isinstance(b, PowerWord):
        return a.factors == b.factors
    return a == b


class PowerWord:
    """Immutable word over letters a1..a_m; factors are (atom, exponent)."""

    __slots__ = ("alphabet_size", "factors", "_len", "_occ")

    def __init__(self, alphabet_size, factors=()):
        if alphabet_size < 1:
            raise WordError("alphabet_size must be >= 1")
        object.__setattr__(self, "alphabet_size", alphabet_size)
        object.__setattr__(self, "factors", _canonical(alphabet_size, factors))
        object.__setattr__(self, "_len", None)
        object.__setattr__(self, "_occ", None)

    def __setattr__(self, *a):
        raise AttributeError("PowerWord is immutable")

    @classmethod
    def letter(cls, alphabet_size, index):
        return cls(alphabet_size, ((index, 1),))

    @classmethod
    def identity(cls, alphabet_size):
        return cls(alphabet_size, ())

    def length(self):
        """Total number of letters, counted with multiplicity (big int)."""
        if self._len is None:
            total = 0
            for atom, exp in self.factors:
                if isinstance(atom, PowerWord):
                    total += exp * atom.length()
                else:
                    total += exp
            object.__setattr__(self, "_len", total)
        return self._len

    def occurrence_vector(self):
        if self._occ is None:
            occ = [0] * (self.alphabet_size + 1)
            for atom, exp in self.factors:
                if isinstance(atom, PowerWord):
                    sub = atom.occurrence_vector()
                    for i in range(1, atom.alphabet_size + 1):
                        occ[i] += exp * sub[i]
                else:
                    occ[atom] += exp
            object.__setattr__(self, "_occ", tuple(occ))
        return self._occ

    def is_identity(self):
        return not self.factors

    def runs(self):
        """Lazily yield the fully flattened (letter, count) run stream."""
        for atom, exp in self.factors:
            if isinstance(atom, PowerWord):
                for _ in range(exp):
                    yield from atom.runs()
            else:
                yield atom, exp

    def __eq__(self, other):
        if not isinstance(other, PowerWord):
            return NotImplemented
        if self.alphabet_size != other.alphabet_size:
            return False
        if self.factors == other.factors:
            return True
        if self.length() != other.length():
            return False
        if self.occurrence_vector() != other.occurrence_vector():
            return False
        return _streams_equal(self, other)

    def __hash__(self):
        return hash((self.alphabet_size, self.length(), self.occurrence_vector()))

    def __mul__(self, other):
        return concat(self, other)

    def __pow__(self, e):
        return power(self, e)

    def serialize(self):
        """Compact text form: word := factor+, factor := aN | (word)^e."""
        parts = []
        for atom, exp in self.factors:
            if isinstance(atom, PowerWord):
                parts.append(f"({atom.serialize()})^{_fmt_exp(exp)}")
            elif exp == 1:
                parts.append(f"a{atom}")
            else:
                parts.append(f"(a{atom})^{_fmt_exp(exp)}")
        return "".join(parts)

    def __repr__(self):
        s = self.serialize()
        if len(s) > 120:
            s = s[:117] + "..."
        return f"PowerWord({self.alphabet_size}, {s!r})"


def _fmt_exp(e: int) -> str:
    # exponents beyond 4096 digits use mantissa'p'shift with e = mantissa * 2^shift
    if int_digits(e) <= 4096:
        return str(e)
    man, shift = e >> _trailing_zeros(e), _trailing_zeros(e)
    return f"{man}p{shift}"


def _trailing_zeros(n: int) -> int:
    return (n & -n).bit_length() - 1


def _merged_runs(word):
    """Run stream with adjacent equal letters merged."""
    cur_letter = None
    cur_count = 0
    for letter, count in word.runs():
        if letter == cur_letter:
            cur_count += count
        else:
            if cur_letter is not None:
                yield cur_letter, cur_count
            cur_letter, cur_count = letter, count
    if cur_letter is not None:
        yield cur_letter, cur_count


def _streams_equal(w1, w2, budget=None):
    """Compare flattened run streams without materializing expansions.

    The step budget guards against pathologically misaligned huge powers
    (e.g. (a1a2)^(10^18) vs its rotation); words produced by this package
    compare within a handful of steps.
    """
    if budget is None:
        budget = 64 + 8 * (_chunk_count(w1) + _chunk_count(w2))
    it1, it2 = _merged_runs(w1), _merged_runs(w2)
    r1 = r2 = None
    steps = 0
    while True:
        if r1 is None:
            r1 = next(it1, None)
        if r2 is None:
            r2 = next(it2, None)
        if r1 is None or r2 is None:
            return r1 is None and r2 is None
        steps += 1
        if steps > budget:
            raise EqualityBudgetError(
                "semantic equality undecided within step budget "
                f"({budget} runs); words are too misaligned to compare lazily"
            )
        l1, c1 = r1
        l2, c2 = r2
        if l1 != l2:
            return False
        if c1 == c2:
            r1 = r2 = None
        elif c1 < c2:
            r1, r2 = None, (l2, c2 - c1)
        else:
            r1, r2 = (l1, c1 - c2), None


def _chunk_count(word):
    n = 0
    for atom, _ in word.factors:
        if isinstance(atom, PowerWord):
            n += _chunk_count(atom)
        else:
            n += 1
    return n


# ---------------------------------------------------------------------------
# operations

def concat(w1: PowerWord, w2: PowerWord) -> PowerWord:
    """Product in the free semigroup; on evaluation w2 acts first."""
    if w1.alphabet_size != w2.alphabet_size:
        raise WordError("alphabet size mismatch in concat")
    return PowerWord(w1.alphabet_size, w1.factors + w2.factors)


def power(w: PowerWord, e) -> PowerWord:
    if e < 1:
        raise WordError("power exponent must be >= 1 (identity is the empty word)")
    if e == 1 or w.is_identity():
        return w
    return PowerWord(w.alphabet_size, ((w, e),))


def substitute(w: PowerWord, letter: int, replacement: PowerWord,
               alphabet_size: int | None = None) -> PowerWord:
    """Replace every occurrence of a_letter by the replacement word."""
    if letter < 1 or (alphabet_size is None and letter > w.alphabet_size):
        raise WordError(f"letter a{letter} out of range")
    if alphabet_size is None:
        alphabet_size = max(w.alphabet_size, replacement.alphabet_size)
    out = []
    for atom, exp in w.factors:
        if isinstance(atom, PowerWord):
            out.append((substitute(atom, letter, replacement, alphabet_size), exp))
        elif atom == letter:
            out.append((replacement, exp))
        else:
            out.append((atom, exp))
    return PowerWord(alphabet_size, out)


def occurrences(w: PowerWord, letter: int):
    if not 1 <= letter <= w.alphabet_size:
        raise WordError(f"letter a{letter} out of range")
    return w.occurrence_vector()[letter]


def restrict_alphabet(w: PowerWord, size: int) -> PowerWord:
    """Re-declare the word over a smaller alphabet (letters must fit)."""
    occ = w.occurrence_vector()
    for i in range(size + 1, w.alphabet_size + 1):
        if occ[i]:
            raise WordError(f"letter a{i} present; cannot restrict alphabet to {size}")

    def rebuild(word):
        factors = []
        for atom, e in word.factors:
            if isinstance(atom, PowerWord):
                factors.append((rebuild(atom), e))
            else:
                factors.append((atom, e))
        return PowerWord(size, factors)

    return rebuild(w)


def transpose_letters(w: PowerWord, i: int, j: int) -> PowerWord:
    """Swap letters a_i and a_j throughout the word."""
    out = []
    for atom, exp in w.factors:
        if isinstance(atom, PowerWord):
            out.append((transpose_letters(atom, i, j), exp))
        elif atom == i:
            out.append((j, exp))
        elif atom == j:
            out.append((i, exp))
        else:
            out.append((atom, exp))
    return PowerWord(w.alphabet_size, out)


# ---------------------------------------------------------------------------
# evaluation over matrices

class OperatorAssignment:
    """Maps letters to square matrices of one common dimension.

    Letters flagged as contractions are checked to have operator norm at
    most 1 + tol.  Letters with ``spectral=True`` are eigendecomposed once
    (symmetric case) so huge powers evaluate through their spectrum.
    """

    CONTRACTION_TOL = 1e-9

    def __init__(self, matrices: dict, contractions=(), spectral=()):
        if not matrices:
            raise WordError("empty assignment")
        self.matrices = {i: np.asarray(m, dtype=float) for i, m in matrices.items()}
        dims = {m.shape for m in self.matrices.values()}
        if len(dims) != 1 or any(s[0] != s[1] for s in dims):
            raise WordError("all assigned matrices must be square of equal dimension")
        self.dim = next(iter(dims))[0]
        for i in contractions:
            nrm = np.linalg.norm(self.matrices[i], 2)
            if nrm > 1 + self.CONTRACTION_TOL:
                raise WordError(f"letter a{i} declared a contraction but has norm {nrm}")
        self.spectral_data = {}
        for i in spectral:
            m = self.matrices[i]
            if not np.allclose(m, m.T, atol=1e-12):
                raise WordError(f"spectral shortcut requires symmetric matrix for a{i}")
            vals, vecs = np.linalg.eigh(m)
            self.spectral_data[i] = (vals, vecs)

    def matrix(self, letter):
        try:
            return self.matrices[letter]
        except KeyError:
            raise WordError(f"letter a{letter} is not assigned") from None


def _matrix_power_ge1(M, e, spectral=None):
    """M^e for integer e >= 1 by repeated squaring or via a spectral pair."""
    if spectral is not None:
        vals, vecs = spectral
        ve = np.sign(vals) ** (e % 2) * np.abs(vals) ** float(e) if e < 2**53 else _huge_pow(vals, e)
        return (vecs * ve) @ vecs.T
    result = None
    base = M
    while e:
        if e & 1:
            result = base if result is None else result @ base
        e >>= 1
        if e:
            base = base @ base
    return result


def _huge_pow(vals, e):
    out = np.zeros_like(vals)
    for idx, v in enumerate(vals):
        if v <= 0:
            out[idx] = 0.0 if abs(v) < 1 else np.nan
        else:
            out[idx] = np.exp(float(e) * np.log(v)) if v < 1 else (1.0 if v <= 1 + 1e-12 else np.inf)
    return out


def evaluate(w: PowerWord, assignment: OperatorAssignment) -> np.ndarray:
    """Literal product A_{i_r} ... A_{i_1}; the rightmost factor acts first."""
    acc = np.eye(assignment.dim)
    for atom, exp in reversed(w.factors):
        if isinstance(atom, PowerWord):
            base = evaluate(atom, assignment)
            block = _matrix_power_ge1(base, exp)
        else:
            block = _matrix_power_ge1(assignment.matrix(atom), exp,
                                      assignment.spectral_data.get(atom))
        acc = block @ acc
    return acc


# ---------------------------------------------------------------------------
# word-continuity inequality (used as a property-test oracle)

def check_word_continuity(psi: PowerWord, A: OperatorAssignment,
                          B: OperatorAssignment, E: np.ndarray,
                          tol: float = 1e-9):
    """Compare ||psi(A)E - psi(B)E|| against sum_i |psi_i| ||A_i E - B_i E||.

    Preconditions: every assigned operator and E are contractions, and each
    A_i commutes with E (within tol).  With E = I this specializes to the
    projection-perturbation bound; with E a subspace projector it gives the
    localized variant.
    """
    E = np.asarray(E, dtype=float)
    for name, asg in (("A", A), ("B", B)):
        for i, M in asg.matrices.items():
            nrm = np.linalg.norm(M, 2)
            if nrm > 1 + tol:
                raise WordError(f"{name}_{i} is not a contraction (norm {nrm:.3e})")
    nE = np.linalg.norm(E, 2)
    if nE > 1 + tol:
        raise WordError(f"E is not a contraction (norm {nE:.3e})")
    for i, M in A.matrices.items():
        comm = np.linalg.norm(M @ E - E @ M, 2)
        if comm > tol:
            raise WordError(f"A_{i} does not commute with E (commutator norm {comm:.3e})")
    lhs = np.linalg.norm(evaluate(psi, A) @ E - evaluate(psi, B) @ E, 2)
    occ = psi.occurrence_vector()
    rhs = 0.0
    for i in range(1, psi.alphabet_size + 1):
        if occ[i]:
            rhs += occ[i] * np.linalg.norm(A.matrix(i) @ E - B.matrix(i) @ E, 2)
    return lhs, rhs, bool(lhs <= rhs + tol)


# ---------------------------------------------------------------------------
# text grammar

def parse_word(text: str, alphabet_size: int) -> PowerWord:
    """Parse the serialization grammar; the empty string is the identity."""
    pos = 0
    n = len(text)

    def parse_seq(depth):
        nonlocal pos
        factors = []
        while pos < n and text[pos] != ")":
            ch = text[pos]
            if ch == "a":
                pos += 1
                idx = _parse_int()
                factors.append((idx, 1))
            elif ch == "(":
                pos += 1
                inner = parse_seq(depth + 1)
                if pos >= n or text[pos] != ")":
                    raise WordError("unbalanced parenthesis in word text")
                pos += 1
                if pos >= n or text[pos] != "^":
                    raise WordError("expected '^' after ')'")
                pos += 1
                exp = _parse_exp()
                factors.append((inner, exp))
            else:
                raise WordError(f"unexpected character {ch!r} at {pos}")
        return PowerWord(alphabet_size, factors)

    def _parse_int():
        nonlocal pos
        start = pos
        while pos < n and text[pos].isdigit():
            pos += 1
        if start == pos:
            raise WordError(f"expected digits at {start}")
        return int(text[start:pos])

    def _parse_exp():
        nonlocal pos
        man = _parse_int()
        if pos < n and text[pos] == "p":
            pos += 1
            shift = _parse_int()
            return man << shift
        return man

    word = parse_seq(0)
    if pos != n:
        raise WordError("trailing characters in word text")
    return word
