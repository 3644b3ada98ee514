//! Molecular graph data model and everything computed directly from it:
//! node attribute matrix, Morgan fingerprint, and the ten-descriptor set
//! behind the property auxiliary tasks.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::rng::mix_into;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph must contain at least one atom")]
    Empty,
    #[error("bond {index} references an atom out of range")]
    BadBond { index: usize },
    #[error("bond {index} joins an atom to itself")]
    SelfBond { index: usize },
    #[error("parallel bond between atoms {a} and {b}")]
    ParallelBond { a: usize, b: usize },
    #[error("atom {atom}: bonds exceed the default valence of {symbol}")]
    ValenceViolation { atom: usize, symbol: &'static str },
}

// ---------------------------------------------------------------------------
// Elements
// ---------------------------------------------------------------------------

/// The supported element set: the SMILES organic subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
}

pub const ELEMENTS: [Element; 10] = [
    Element::B,
    Element::C,
    Element::N,
    Element::O,
    Element::P,
    Element::S,
    Element::F,
    Element::Cl,
    Element::Br,
    Element::I,
];

/// Mass of implicit hydrogen.
pub const HYDROGEN_MASS: f64 = 1.008;

impl Element {
    pub fn from_symbol(sym: &str) -> Option<Element> {
        Some(match sym {
            "B" => Element::B,
            "C" => Element::C,
            "N" => Element::N,
            "O" => Element::O,
            "P" => Element::P,
            "S" => Element::S,
            "F" => Element::F,
            "Cl" => Element::Cl,
            "Br" => Element::Br,
            "I" => Element::I,
            _ => return None,
        })
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn atomic_number(self) -> u8 {
        match self {
            Element::B => 5,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::P => 15,
            Element::S => 16,
            Element::F => 9,
            Element::Cl => 17,
            Element::Br => 35,
            Element::I => 53,
        }
    }

    /// Default valence used for implicit-hydrogen assignment.
    pub fn default_valence(self) -> u8 {
        match self {
            Element::B => 3,
            Element::C => 4,
            Element::N => 3,
            Element::O => 2,
            Element::P => 3,
            Element::S => 2,
            Element::F | Element::Cl | Element::Br | Element::I => 1,
        }
    }

    /// Standard atomic mass, at most four decimals.
    pub fn mass(self) -> f64 {
        match self {
            Element::B => 10.81,
            Element::C => 12.011,
            Element::N => 14.007,
            Element::O => 15.999,
            Element::P => 30.9738,
            Element::S => 32.06,
            Element::F => 18.9984,
            Element::Cl => 35.45,
            Element::Br => 79.904,
            Element::I => 126.9045,
        }
    }

    /// Whether the element may appear as a lowercase aromatic atom.
    pub fn supports_aromatic(self) -> bool {
        matches!(
            self,
            Element::B | Element::C | Element::N | Element::O | Element::P | Element::S
        )
    }

    pub fn one_hot_index(self) -> usize {
        ELEMENTS.iter().position(|&e| e == self).unwrap()
    }
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to the valence sum; aromatic counts 1.5 and the total is
    /// floored before comparing against the default valence.
    pub fn valence_units(self) -> f32 {
        match self {
            BondOrder::Single => 1.0,
            BondOrder::Double => 2.0,
            BondOrder::Triple => 3.0,
            BondOrder::Aromatic => 1.5,
        }
    }

    /// Stable small integer for sorting and hashing.
    pub fn key(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i8,
    pub implicit_h: u8,
    pub aromatic: bool,
    pub in_ring: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if atom == self.a {
            self.b
        } else {
            self.a
        }
    }
}

/// Input atom for [`MolecularGraph::build`]. Bracket atoms carry an explicit
/// hydrogen count; organic-subset atoms leave it to the default-valence rule.
#[derive(Debug, Clone, Copy)]
pub struct AtomSpec {
    pub element: Element,
    pub formal_charge: i8,
    pub explicit_h: Option<u8>,
    pub aromatic: bool,
}

impl AtomSpec {
    pub fn organic(element: Element) -> Self {
        Self {
            element,
            formal_charge: 0,
            explicit_h: None,
            aromatic: false,
        }
    }

    pub fn aromatic(element: Element) -> Self {
        Self {
            element,
            formal_charge: 0,
            explicit_h: None,
            aromatic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// Per atom: (neighbor index, bond index), in bond insertion order.
    adjacency: Vec<Vec<(usize, usize)>>,
    ring_bond: Vec<bool>,
}

impl MolecularGraph {
    /// Validate connectivity, assign implicit hydrogens, and compute ring
    /// membership for atoms and bonds.
    pub fn build(specs: Vec<AtomSpec>, bonds: Vec<Bond>) -> Result<Self, GraphError> {
        if specs.is_empty() {
            return Err(GraphError::Empty);
        }
        let n = specs.len();
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (i, bond) in bonds.iter().enumerate() {
            if bond.a >= n || bond.b >= n {
                return Err(GraphError::BadBond { index: i });
            }
            if bond.a == bond.b {
                return Err(GraphError::SelfBond { index: i });
            }
            if adjacency[bond.a].iter().any(|&(nb, _)| nb == bond.b) {
                return Err(GraphError::ParallelBond {
                    a: bond.a,
                    b: bond.b,
                });
            }
            adjacency[bond.a].push((bond.b, i));
            adjacency[bond.b].push((bond.a, i));
        }

        let mut atoms = Vec::with_capacity(n);
        for (i, spec) in specs.iter().enumerate() {
            let implicit_h = match spec.explicit_h {
                Some(h) => h,
                None => {
                    let units: f32 = adjacency[i]
                        .iter()
                        .map(|&(_, bi)| bonds[bi].order.valence_units())
                        .sum();
                    let used = units.floor() as u8;
                    let default = spec.element.default_valence();
                    if used > default {
                        return Err(GraphError::ValenceViolation {
                            atom: i,
                            symbol: spec.element.symbol(),
                        });
                    }
                    default - used
                }
            };
            atoms.push(Atom {
                element: spec.element,
                formal_charge: spec.formal_charge,
                implicit_h,
                aromatic: spec.aromatic,
                in_ring: false,
            });
        }

        let ring_bond = find_ring_bonds(n, &bonds, &adjacency);
        for (bi, &in_ring) in ring_bond.iter().enumerate() {
            if in_ring {
                atoms[bonds[bi].a].in_ring = true;
                atoms[bonds[bi].b].in_ring = true;
            }
        }

        Ok(Self {
            atoms,
            bonds,
            adjacency,
            ring_bond,
        })
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &Atom {
        &self.atoms[i]
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.adjacency[atom].len()
    }

    /// Neighbors of an atom as (neighbor, bond index) pairs.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.adjacency[a]
            .iter()
            .find(|&&(nb, _)| nb == b)
            .map(|&(_, bi)| &self.bonds[bi])
    }

    pub fn bond_in_ring(&self, bond_index: usize) -> bool {
        self.ring_bond[bond_index]
    }

    /// Relabel atoms: old index i becomes perm[i].
    pub fn permuted(&self, perm: &[usize]) -> MolecularGraph {
        assert_eq!(perm.len(), self.atoms.len());
        let mut specs = vec![None; self.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            let a = &self.atoms[old];
            specs[new] = Some(AtomSpec {
                element: a.element,
                formal_charge: a.formal_charge,
                explicit_h: Some(a.implicit_h),
                aromatic: a.aromatic,
            });
        }
        let specs: Vec<AtomSpec> = specs.into_iter().map(|s| s.unwrap()).collect();
        let bonds: Vec<Bond> = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                order: b.order,
            })
            .collect();
        MolecularGraph::build(specs, bonds).expect("permutation preserves validity")
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let n = self.atoms.len();
        let mut seen = vec![false; n];
        let mut components = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(a) = stack.pop() {
                for &(nb, _) in &self.adjacency[a] {
                    if !seen[nb] {
                        seen[nb] = true;
                        stack.push(nb);
                    }
                }
            }
        }
        components
    }
}

/// A bond is a ring bond iff its endpoints stay connected without it.
fn find_ring_bonds(n: usize, bonds: &[Bond], adjacency: &[Vec<(usize, usize)>]) -> Vec<bool> {
    let mut out = vec![false; bonds.len()];
    for (bi, bond) in bonds.iter().enumerate() {
        let mut seen = vec![false; n];
        let mut stack = vec![bond.a];
        seen[bond.a] = true;
        let mut connected = false;
        while let Some(a) = stack.pop() {
            if a == bond.b {
                connected = true;
                break;
            }
            for &(nb, nbi) in &adjacency[a] {
                if nbi != bi && !seen[nb] {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
        out[bi] = connected;
    }
    out
}

// ---------------------------------------------------------------------------
// Node attribute matrix
// ---------------------------------------------------------------------------

/// Width of each node feature row: element one-hot over the ten supported
/// elements, degree one-hot 0..4+, formal charge one-hot clamped to -2..+2,
/// implicit-H one-hot 0..4, aromatic flag, ring flag.
pub const NODE_FEATURE_DIM: usize = 10 + 5 + 5 + 5 + 1 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeAttributeMatrix {
    rows: usize,
    data: Vec<f32>,
}

impl NodeAttributeMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * NODE_FEATURE_DIM..(i + 1) * NODE_FEATURE_DIM]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.rows, NODE_FEATURE_DIM], self.data.clone())
    }
}

pub fn node_features(graph: &MolecularGraph) -> NodeAttributeMatrix {
    let rows = graph.atom_count();
    let mut data = vec![0.0f32; rows * NODE_FEATURE_DIM];
    for (i, atom) in graph.atoms().iter().enumerate() {
        let row = &mut data[i * NODE_FEATURE_DIM..(i + 1) * NODE_FEATURE_DIM];
        row[atom.element.one_hot_index()] = 1.0;
        let degree = graph.degree(i).min(4);
        row[10 + degree] = 1.0;
        let charge = (atom.formal_charge.clamp(-2, 2) + 2) as usize;
        row[15 + charge] = 1.0;
        let h = (atom.implicit_h as usize).min(4);
        row[20 + h] = 1.0;
        if atom.aromatic {
            row[25] = 1.0;
        }
        if atom.in_ring {
            row[26] = 1.0;
        }
    }
    NodeAttributeMatrix { rows, data }
}

// ---------------------------------------------------------------------------
// Morgan fingerprint
// ---------------------------------------------------------------------------

pub const FINGERPRINT_BITS: usize = 2048;
pub const FINGERPRINT_RADIUS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    bits: Vec<bool>,
    radius: u32,
}

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Dense f32 row vector for the fingerprint projector.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f32> = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(vec![1, self.bits.len()], data)
    }

    /// Lowercase hex, most-significant bit first: the first character holds
    /// bits len-1..len-4.
    pub fn to_hex(&self) -> String {
        let mut out = String::with_capacity(self.bits.len() / 4);
        for chunk in (0..self.bits.len()).step_by(4) {
            let top = self.bits.len() - chunk;
            let mut nibble = 0u8;
            for k in 0..4 {
                nibble <<= 1;
                if self.bits[top - 1 - k] {
                    nibble |= 1;
                }
            }
            out.push(char::from_digit(nibble as u32, 16).unwrap());
        }
        out
    }
}

/// Hash every atom environment of radius 0..=radius and set one bit per
/// distinct identifier. An atom with no neighbors keeps its radius-0
/// identifier at every radius, so duplicated environments collapse.
pub fn morgan_fingerprint(graph: &MolecularGraph, radius: u32, n_bits: usize) -> Fingerprint {
    assert!(n_bits.is_power_of_two(), "n_bits must be a power of two");
    let ids = morgan_identifiers(graph, radius);
    let mut bits = vec![false; n_bits];
    for id in ids {
        bits[(id % n_bits as u64) as usize] = true;
    }
    Fingerprint { bits, radius }
}

pub fn morgan_fingerprint_default(graph: &MolecularGraph) -> Fingerprint {
    morgan_fingerprint(graph, FINGERPRINT_RADIUS, FINGERPRINT_BITS)
}

/// The deduplicated set of environment identifiers; exposed so tests can
/// enumerate environments directly.
pub fn morgan_identifiers(graph: &MolecularGraph, radius: u32) -> BTreeSet<u64> {
    let n = graph.atom_count();
    let mut current: Vec<u64> = graph
        .atoms()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut h = mix_into(0, a.element.atomic_number() as u64);
            h = mix_into(h, (a.formal_charge as i64) as u64);
            h = mix_into(h, a.implicit_h as u64);
            h = mix_into(h, graph.degree(i) as u64);
            h = mix_into(h, a.aromatic as u64);
            h = mix_into(h, a.in_ring as u64);
            h
        })
        .collect();

    let mut ids: BTreeSet<u64> = current.iter().copied().collect();
    for _ in 0..radius {
        let mut next = vec![0u64; n];
        for i in 0..n {
            if graph.degree(i) == 0 {
                next[i] = current[i];
                continue;
            }
            let mut env: Vec<(u8, u64)> = graph
                .neighbors(i)
                .iter()
                .map(|&(nb, bi)| (graph.bonds()[bi].order.key(), current[nb]))
                .collect();
            env.sort_unstable();
            let mut h = mix_into(0, current[i]);
            for (key, nid) in env {
                h = mix_into(h, key as u64);
                h = mix_into(h, nid);
            }
            next[i] = h;
        }
        current = next;
        ids.extend(current.iter().copied());
    }
    ids
}

// ---------------------------------------------------------------------------
// Descriptors
// ---------------------------------------------------------------------------

pub const DESCRIPTOR_NAMES: [&str; 10] = [
    "molecular_weight",
    "heavy_atom_count",
    "total_atom_count",
    "bond_count",
    "ring_count",
    "aromatic_atom_count",
    "hbd_count",
    "hba_count",
    "rotatable_bond_count",
    "net_formal_charge",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub molecular_weight: f64,
    pub heavy_atom_count: usize,
    pub total_atom_count: usize,
    pub bond_count: usize,
    pub ring_count: usize,
    pub aromatic_atom_count: usize,
    pub hbd_count: usize,
    pub hba_count: usize,
    pub rotatable_bond_count: usize,
    pub net_formal_charge: i32,
}

impl DescriptorSet {
    /// Value by descriptor name, as f64.
    pub fn value(&self, name: &str) -> Option<f64> {
        Some(match name {
            "molecular_weight" => self.molecular_weight,
            "heavy_atom_count" => self.heavy_atom_count as f64,
            "total_atom_count" => self.total_atom_count as f64,
            "bond_count" => self.bond_count as f64,
            "ring_count" => self.ring_count as f64,
            "aromatic_atom_count" => self.aromatic_atom_count as f64,
            "hbd_count" => self.hbd_count as f64,
            "hba_count" => self.hba_count as f64,
            "rotatable_bond_count" => self.rotatable_bond_count as f64,
            "net_formal_charge" => self.net_formal_charge as f64,
            _ => return None,
        })
    }

    /// One `name=value` pair per line, names exactly as declared.
    pub fn to_lines(&self) -> String {
        format!(
            "molecular_weight={}\nheavy_atom_count={}\ntotal_atom_count={}\nbond_count={}\nring_count={}\naromatic_atom_count={}\nhbd_count={}\nhba_count={}\nrotatable_bond_count={}\nnet_formal_charge={}\n",
            self.molecular_weight,
            self.heavy_atom_count,
            self.total_atom_count,
            self.bond_count,
            self.ring_count,
            self.aromatic_atom_count,
            self.hbd_count,
            self.hba_count,
            self.rotatable_bond_count,
            self.net_formal_charge,
        )
    }
}

pub fn compute_descriptors(graph: &MolecularGraph) -> DescriptorSet {
    // Sum masses per element so the result is independent of atom order.
    let mut element_counts = [0usize; ELEMENTS.len()];
    let mut h_total = 0usize;
    for atom in graph.atoms() {
        element_counts[atom.element.one_hot_index()] += 1;
        h_total += atom.implicit_h as usize;
    }
    let mut weight = 0.0f64;
    for (i, &count) in element_counts.iter().enumerate() {
        weight += count as f64 * ELEMENTS[i].mass();
    }
    weight += h_total as f64 * HYDROGEN_MASS;

    let heavy = graph.atom_count();
    let bond_count = graph.bonds().len();
    let ring_count = bond_count + graph.component_count() - heavy;

    let is_donor_acceptor = |a: &Atom| matches!(a.element, Element::N | Element::O);
    let hbd = graph
        .atoms()
        .iter()
        .filter(|a| is_donor_acceptor(a) && a.implicit_h > 0)
        .count();
    let hba = graph.atoms().iter().filter(|a| is_donor_acceptor(a)).count();

    let rotatable = graph
        .bonds()
        .iter()
        .enumerate()
        .filter(|(bi, b)| {
            b.order == BondOrder::Single
                && !graph.bond_in_ring(*bi)
                && graph.degree(b.a) >= 2
                && graph.degree(b.b) >= 2
        })
        .count();

    DescriptorSet {
        molecular_weight: weight,
        heavy_atom_count: heavy,
        total_atom_count: heavy + h_total,
        bond_count,
        ring_count,
        aromatic_atom_count: graph.atoms().iter().filter(|a| a.aromatic).count(),
        hbd_count: hbd,
        hba_count: hba,
        rotatable_bond_count: rotatable,
        net_formal_charge: graph.atoms().iter().map(|a| a.formal_charge as i32).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(order: BondOrder, a: usize, b: usize) -> Bond {
        Bond { a, b, order }
    }

    fn ethanol() -> MolecularGraph {
        MolecularGraph::build(
            vec![
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::O),
            ],
            vec![
                single(BondOrder::Single, 0, 1),
                single(BondOrder::Single, 1, 2),
            ],
        )
        .unwrap()
    }

    fn cyclopropane() -> MolecularGraph {
        MolecularGraph::build(
            vec![
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
            ],
            vec![
                single(BondOrder::Single, 0, 1),
                single(BondOrder::Single, 1, 2),
                single(BondOrder::Single, 2, 0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn implicit_hydrogens_follow_default_valences() {
        let g = ethanol();
        let h: Vec<u8> = g.atoms().iter().map(|a| a.implicit_h).collect();
        assert_eq!(h, vec![3, 2, 1]);
    }

    #[test]
    fn valence_violation_is_detected() {
        // An oxygen with three single bonds exceeds its default valence of 2.
        let err = MolecularGraph::build(
            vec![
                AtomSpec::organic(Element::O),
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
            ],
            vec![
                single(BondOrder::Single, 0, 1),
                single(BondOrder::Single, 0, 2),
                single(BondOrder::Single, 0, 3),
            ],
        )
        .unwrap_err();
        assert_eq!(
            err,
            GraphError::ValenceViolation {
                atom: 0,
                symbol: "O"
            }
        );
    }

    #[test]
    fn parallel_and_self_bonds_rejected() {
        let specs = vec![
            AtomSpec::organic(Element::C),
            AtomSpec::organic(Element::C),
        ];
        let err = MolecularGraph::build(
            specs.clone(),
            vec![
                single(BondOrder::Single, 0, 1),
                single(BondOrder::Double, 1, 0),
            ],
        )
        .unwrap_err();
        assert_eq!(err, GraphError::ParallelBond { a: 1, b: 0 });

        let err =
            MolecularGraph::build(specs, vec![single(BondOrder::Single, 1, 1)]).unwrap_err();
        assert_eq!(err, GraphError::SelfBond { index: 0 });
    }

    #[test]
    fn ring_flags_set_on_cycle() {
        let g = cyclopropane();
        assert!(g.atoms().iter().all(|a| a.in_ring));
        assert!((0..3).all(|bi| g.bond_in_ring(bi)));
        let chain = ethanol();
        assert!(chain.atoms().iter().all(|a| !a.in_ring));
    }

    #[test]
    fn methane_features_row() {
        let g = MolecularGraph::build(vec![AtomSpec::organic(Element::C)], vec![]).unwrap();
        let feats = node_features(&g);
        assert_eq!(feats.rows(), 1);
        let row = feats.row(0);
        assert_eq!(row.len(), NODE_FEATURE_DIM);
        assert_eq!(row[1], 1.0, "carbon slot");
        assert_eq!(row[10], 1.0, "degree-0 slot");
        assert_eq!(row[15 + 2], 1.0, "charge-0 slot");
        assert_eq!(row[20 + 4], 1.0, "implicit-H-4 slot");
        assert_eq!(row.iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn feature_rows_permute_with_atoms() {
        let g = ethanol();
        let feats = node_features(&g);
        let perm = vec![2usize, 0, 1];
        let permuted = g.permuted(&perm);
        let pfeats = node_features(&permuted);
        for old in 0..3 {
            assert_eq!(feats.row(old), pfeats.row(perm[old]));
        }
    }

    #[test]
    fn one_hot_blocks_sum_to_one() {
        let g = cyclopropane();
        let feats = node_features(&g);
        for i in 0..feats.rows() {
            let row = feats.row(i);
            assert_eq!(row[0..10].iter().sum::<f32>(), 1.0);
            assert_eq!(row[10..15].iter().sum::<f32>(), 1.0);
            assert_eq!(row[15..20].iter().sum::<f32>(), 1.0);
            assert_eq!(row[20..25].iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn methane_fingerprint_has_exactly_one_bit() {
        let g = MolecularGraph::build(vec![AtomSpec::organic(Element::C)], vec![]).unwrap();
        let fp = morgan_fingerprint(&g, 2, 2048);
        assert_eq!(fp.count_ones(), 1);
    }

    #[test]
    fn fingerprint_differs_between_cco_and_ccc() {
        let cco = ethanol();
        let ccc = MolecularGraph::build(
            vec![
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
            ],
            vec![
                single(BondOrder::Single, 0, 1),
                single(BondOrder::Single, 1, 2),
            ],
        )
        .unwrap();
        // Enumerate environments directly: the oxygen-containing ones cannot
        // appear in propane's set.
        let ids_cco = morgan_identifiers(&cco, 2);
        let ids_ccc = morgan_identifiers(&ccc, 2);
        assert_ne!(ids_cco, ids_ccc);
        assert_ne!(
            morgan_fingerprint(&cco, 2, 2048),
            morgan_fingerprint(&ccc, 2, 2048)
        );
    }

    #[test]
    fn fingerprint_invariant_under_permutation() {
        let g = ethanol();
        let p = g.permuted(&[2, 0, 1]);
        assert_eq!(
            morgan_fingerprint(&g, 2, 2048),
            morgan_fingerprint(&p, 2, 2048)
        );
    }

    #[test]
    fn fingerprint_popcount_monotone_in_radius() {
        let g = cyclopropane();
        let mut last = 0;
        for r in 0..4 {
            let ones = morgan_fingerprint(&g, r, 2048).count_ones();
            assert!(ones >= last, "radius {r}: {ones} < {last}");
            last = ones;
        }
    }

    #[test]
    fn ethanol_descriptors() {
        let d = compute_descriptors(&ethanol());
        assert_eq!(d.heavy_atom_count, 3);
        assert_eq!(d.ring_count, 0);
        assert_eq!(d.hbd_count, 1);
        assert_eq!(d.hba_count, 1);
        assert_eq!(d.rotatable_bond_count, 0);
        assert_eq!(d.bond_count, 2);
        assert_eq!(d.total_atom_count, 9);
        assert!((d.molecular_weight - 46.069).abs() < 1e-9);
    }

    #[test]
    fn cyclopropane_ring_count_uses_cycle_rank() {
        let d = compute_descriptors(&cyclopropane());
        assert_eq!(d.ring_count, 1); // 3 - 3 + 1
    }

    #[test]
    fn ammonium_descriptors() {
        let g = MolecularGraph::build(
            vec![AtomSpec {
                element: Element::N,
                formal_charge: 1,
                explicit_h: Some(4),
                aromatic: false,
            }],
            vec![],
        )
        .unwrap();
        let d = compute_descriptors(&g);
        assert_eq!(d.net_formal_charge, 1);
        assert_eq!(d.total_atom_count, 5);
    }

    #[test]
    fn butane_has_one_rotatable_bond() {
        let g = MolecularGraph::build(
            vec![
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
                AtomSpec::organic(Element::C),
            ],
            vec![
                single(BondOrder::Single, 0, 1),
                single(BondOrder::Single, 1, 2),
                single(BondOrder::Single, 2, 3),
            ],
        )
        .unwrap();
        assert_eq!(compute_descriptors(&g).rotatable_bond_count, 1);
    }

    #[test]
    fn descriptors_invariant_under_permutation_bitwise() {
        let g = cyclopropane();
        let p = g.permuted(&[1, 2, 0]);
        let a = compute_descriptors(&g);
        let b = compute_descriptors(&p);
        assert_eq!(a, b);
        assert_eq!(a.molecular_weight.to_bits(), b.molecular_weight.to_bits());
    }

    #[test]
    fn hex_serialization_is_msb_first() {
        let g = MolecularGraph::build(vec![AtomSpec::organic(Element::C)], vec![]).unwrap();
        let fp = morgan_fingerprint(&g, 0, 16);
        let hex = fp.to_hex();
        assert_eq!(hex.len(), 4);
        // Exactly one bit somewhere; locate it and check the hex position.
        let bit = (0..16).find(|&i| fp.get(i)).unwrap();
        let nibble_from_left = (15 - bit) / 4;
        for (pos, ch) in hex.chars().enumerate() {
            if pos == nibble_from_left {
                assert_ne!(ch, '0');
            } else {
                assert_eq!(ch, '0');
            }
        }
    }
}
