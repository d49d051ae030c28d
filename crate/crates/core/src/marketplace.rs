//! Energy-trading layer: market roles, energy offers, and the fill
//! arithmetic that turns an accepted offer step into a channel update.
//!
//! Energy is traded in integer packets; each accepted step moves
//! `unit_price * quantity` coins buyer→seller and `quantity` packets
//! seller→buyer in one co-signed version, so coin and packet conservation
//! hold simultaneously.

use serde::{Deserialize, Serialize};

use crate::channel::{BalancePair, Side};
use crate::PartyId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarketRole {
    /// Buys energy only.
    Consumer,
    /// May buy and sell.
    Prosumer,
    /// Sells energy only.
    Producer,
    /// Grid intermediary (DSO/TSO); may buy and sell.
    Distributor,
}

impl MarketRole {
    pub fn may_buy(&self) -> bool {
        !matches!(self, MarketRole::Producer)
    }

    pub fn may_sell(&self) -> bool {
        !matches!(self, MarketRole::Consumer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MarketError {
    #[error("role may not take this side of the trade")]
    RoleViolation,
    #[error("fill exceeds offered quantity")]
    OverFill,
    #[error("insufficient coins for the fill")]
    InsufficientCoins,
    #[error("insufficient packets for the fill")]
    InsufficientPackets,
    #[error("offer validity elapsed")]
    OfferExpired,
}

/// An offer to sell `quantity` energy packets at `unit_price` coins per
/// packet, valid until the stated block height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyOffer {
    pub seller: PartyId,
    pub quantity: u64,
    pub unit_price: u64,
    pub validity: u64,
}

/// Compute the balances after filling `quantity` packets of an offer inside
/// a channel whose current balances are `current`, with the seller on
/// `seller_side`. Pure arithmetic; channel-level checks (phase, counter,
/// timer) stay with the channel rules.
pub fn fill_balances(
    current: &BalancePair,
    seller_side: Side,
    quantity: u64,
    unit_price: u64,
) -> Result<BalancePair, MarketError> {
    let cost = quantity
        .checked_mul(unit_price)
        .ok_or(MarketError::InsufficientCoins)?;
    let mut next = *current;
    let (seller, buyer) = match seller_side {
        Side::I => (&mut next.party_i, &mut next.party_j),
        Side::J => (&mut next.party_j, &mut next.party_i),
    };
    if buyer.coins < cost {
        return Err(MarketError::InsufficientCoins);
    }
    if seller.packets < quantity {
        return Err(MarketError::InsufficientPackets);
    }
    buyer.coins -= cost;
    seller.coins += cost;
    seller.packets -= quantity;
    buyer.packets += quantity;
    Ok(next)
}

/// Role gate for one trade step.
pub fn check_roles(seller_role: MarketRole, buyer_role: MarketRole) -> Result<(), MarketError> {
    if !seller_role.may_sell() || !buyer_role.may_buy() {
        return Err(MarketError::RoleViolation);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::CoinsPackets;

    #[test]
    fn full_fill_matches_worked_example() {
        // deposits (100,100) coins, (0,10) packets; buy 10 packets @ 5
        let start = BalancePair::new(CoinsPackets::new(100, 0), CoinsPackets::new(100, 10));
        let next = fill_balances(&start, Side::J, 10, 5).unwrap();
        assert_eq!(next.party_i, CoinsPackets::new(50, 10));
        assert_eq!(next.party_j, CoinsPackets::new(150, 0));
        assert!(next.conserves(&start));
    }

    #[test]
    fn partial_fills_compose_to_full_fill() {
        let start = BalancePair::new(CoinsPackets::new(100, 0), CoinsPackets::new(100, 10));
        let mut stepped = start;
        for q in [4, 3, 3] {
            stepped = fill_balances(&stepped, Side::J, q, 5).unwrap();
        }
        let oneshot = fill_balances(&start, Side::J, 10, 5).unwrap();
        assert_eq!(stepped, oneshot);
    }

    #[test]
    fn consumer_cannot_sell() {
        assert_eq!(
            check_roles(MarketRole::Consumer, MarketRole::Prosumer),
            Err(MarketError::RoleViolation)
        );
    }

    #[test]
    fn producer_cannot_buy() {
        assert_eq!(
            check_roles(MarketRole::Prosumer, MarketRole::Producer),
            Err(MarketError::RoleViolation)
        );
    }

    #[test]
    fn prosumer_and_distributor_may_trade_both_ways() {
        assert!(check_roles(MarketRole::Prosumer, MarketRole::Consumer).is_ok());
        assert!(check_roles(MarketRole::Distributor, MarketRole::Prosumer).is_ok());
    }

    #[test]
    fn fill_respects_balances() {
        let start = BalancePair::new(CoinsPackets::new(10, 0), CoinsPackets::new(100, 3));
        assert_eq!(
            fill_balances(&start, Side::J, 3, 5).unwrap_err(),
            MarketError::InsufficientCoins
        );
        assert_eq!(
            fill_balances(&start, Side::J, 4, 1).unwrap_err(),
            MarketError::InsufficientPackets
        );
    }
}
